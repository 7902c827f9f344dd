import numpy as np
import pytest
import torch

from apptrans.adaptive_conv import (
    FilterGenerator,
    FilterSpec,
    apply_filter,
    block_diagonal_expansion,
    statistics_filter,
)
from apptrans.datamodel import AppearanceFilter, ConfigError, ValidationError


def brute_force_conv(f: np.ndarray, w: np.ndarray, bias, groups: int) -> np.ndarray:
    """Nested-loop grouped 2D convolution with 'same' zero padding (the oracle)."""
    c_in, height, width = f.shape
    c_out, c_in_pg, k, _ = w.shape
    pad = k // 2
    out_per_group = c_out // groups
    out = np.zeros((c_out, height, width), dtype=np.float64)
    for o in range(c_out):
        g = o // out_per_group
        for y in range(height):
            for x in range(width):
                acc = 0.0 if bias is None else float(bias[o])
                for ci in range(c_in_pg):
                    cin = g * c_in_pg + ci
                    for ky in range(k):
                        for kx in range(k):
                            yy, xx = y + ky - pad, x + kx - pad
                            if 0 <= yy < height and 0 <= xx < width:
                                acc += f[cin, yy, xx] * w[o, ci, ky, kx]
                out[o, y, x] = acc
    return out


def random_filter(rng, c_in, groups, c_out, k, with_bias=True):
    c_in_pg = c_in // groups
    weights = torch.tensor(rng.standard_normal((c_out, c_in_pg, k, k)))
    bias = torch.tensor(rng.standard_normal(c_out)) if with_bias else None
    return AppearanceFilter(weights=weights, groups=groups, bias=bias)


class TestApply:
    def test_identity_delta_kernel(self):
        c, k = 4, 3
        w = torch.zeros(c, 1, k, k, dtype=torch.float64)
        w[:, 0, k // 2, k // 2] = 1.0
        filt = AppearanceFilter(weights=w, groups=c, bias=torch.zeros(c, dtype=torch.float64))
        f = torch.tensor(np.random.default_rng(0).standard_normal((c, 5, 5)))
        assert torch.equal(apply_filter(f, filt), f)

    def test_1x1_depthwise_is_channel_scaling(self):
        w = torch.tensor([2.0, -1.0]).reshape(2, 1, 1, 1)
        filt = AppearanceFilter(weights=w, groups=2, bias=None)
        f = torch.arange(2 * 3 * 3, dtype=torch.float32).reshape(2, 3, 3)
        out = apply_filter(f, filt)
        assert torch.equal(out[0], 2.0 * f[0])
        assert torch.equal(out[1], -1.0 * f[1])

    def test_matches_brute_force_depthwise(self):
        rng = np.random.default_rng(1)
        f = torch.tensor(rng.standard_normal((2, 3, 3)))
        filt = random_filter(rng, 2, 2, 2, 3)
        out = apply_filter(f, filt)
        expected = brute_force_conv(f.numpy(), filt.weights.numpy(), filt.bias.numpy(), 2)
        assert np.abs(out.numpy() - expected).max() < 1e-6

    @pytest.mark.parametrize("c_in,groups,c_out,k", [
        (4, 2, 4, 3), (6, 3, 6, 5), (4, 1, 3, 3), (8, 4, 8, 1), (6, 2, 4, 3),
    ])
    def test_matches_brute_force_grouped(self, c_in, groups, c_out, k):
        rng = np.random.default_rng(c_in * 100 + groups * 10 + k)
        f = torch.tensor(rng.standard_normal((c_in, 4, 4)))
        filt = random_filter(rng, c_in, groups, c_out, k)
        out = apply_filter(f, filt)
        expected = brute_force_conv(f.numpy(), filt.weights.numpy(), filt.bias.numpy(), groups)
        assert np.abs(out.numpy() - expected).max() < 1e-6

    def test_block_diagonal_equivalence(self):
        rng = np.random.default_rng(5)
        for groups, c_in, c_out in [(2, 4, 4), (3, 6, 6), (4, 8, 4 * 3)]:
            f = torch.tensor(rng.standard_normal((c_in, 5, 5)))
            filt = random_filter(rng, c_in, groups, c_out, 3)
            grouped = apply_filter(f, filt)
            full = AppearanceFilter(weights=block_diagonal_expansion(filt), groups=1,
                                    bias=filt.bias)
            assert np.abs((grouped - apply_filter(f, full)).numpy()).max() < 1e-6

    def test_even_kernel_rejected(self):
        w = torch.zeros(2, 1, 2, 2)
        filt = AppearanceFilter(weights=w, groups=2)
        with pytest.raises(ConfigError):
            apply_filter(torch.zeros(2, 4, 4), filt)

    def test_channel_mismatch_rejected(self):
        filt = random_filter(np.random.default_rng(0), 4, 2, 4, 3)
        with pytest.raises(ValidationError):
            apply_filter(torch.zeros(6, 4, 4), filt)

    def test_linearity_with_bias_accounted(self):
        # apply(a*f1 + b*f2, w) = a*apply(f1,w) + b*apply(f2,w) - (a+b-1)*bias_map
        rng = np.random.default_rng(3)
        filt = random_filter(rng, 4, 2, 4, 3)
        f1 = torch.tensor(rng.standard_normal((4, 5, 5)))
        f2 = torch.tensor(rng.standard_normal((4, 5, 5)))
        alpha, beta = 1.7, -0.6
        lhs = apply_filter(alpha * f1 + beta * f2, filt)
        bias_map = filt.bias.reshape(-1, 1, 1).expand_as(lhs)
        rhs = alpha * apply_filter(f1, filt) + beta * apply_filter(f2, filt) \
            - (alpha + beta - 1.0) * bias_map
        assert np.abs((lhs - rhs).numpy()).max() < 1e-6

    def test_batched_matches_single(self):
        rng = np.random.default_rng(8)
        filt = random_filter(rng, 4, 4, 4, 3)
        fs = torch.tensor(rng.standard_normal((2, 4, 4, 4)))
        batched = apply_filter(fs, filt)
        for i in range(2):
            assert torch.allclose(batched[i], apply_filter(fs[i], filt), atol=1e-9)


class TestNormalizationSubsumption:
    def test_adain_style_transfer_exact(self):
        # the k=1 statistic filter reproduces channel-wise affine restyling
        rng = np.random.default_rng(11)
        c = 6
        f = torch.tensor(rng.standard_normal((c, 7, 7)))
        mu_s = f.mean(dim=(1, 2))
        sd_s = f.std(dim=(1, 2), unbiased=False)
        mu_t = torch.tensor(rng.standard_normal(c))
        sd_t = torch.tensor(rng.uniform(0.5, 2.0, c))
        filt = statistics_filter(mu_s, sd_s, mu_t, sd_t)
        assert filt.weights.shape == (c, 1, 1, 1)
        out = apply_filter(f, filt)
        direct = (f - mu_s.reshape(-1, 1, 1)) / sd_s.reshape(-1, 1, 1) \
            * sd_t.reshape(-1, 1, 1) + mu_t.reshape(-1, 1, 1)
        assert np.abs((out - direct).numpy()).max() < 1e-6


class TestGradients:
    def _fd_grad(self, fn, tensor, eps=1e-3):
        grad = torch.zeros_like(tensor)
        flat = tensor.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + eps
            hi = float(fn())
            flat[i] = orig - eps
            lo = float(fn())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        return grad

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(21)
        f = torch.tensor(rng.standard_normal((2, 4, 4)), requires_grad=True)
        weights = torch.tensor(rng.standard_normal((2, 1, 3, 3)), requires_grad=True)
        bias = torch.tensor(rng.standard_normal(2), requires_grad=True)
        probe = torch.tensor(rng.standard_normal((2, 4, 4)))

        def loss_fn():
            filt = AppearanceFilter(weights=weights, groups=2, bias=bias)
            return (apply_filter(f, filt) * probe).sum()

        loss = loss_fn()
        gf, gw, gb = torch.autograd.grad(loss, [f, weights, bias])
        for analytic, tensor in [(gf, f), (gw, weights), (gb, bias)]:
            with torch.no_grad():
                fd = self._fd_grad(loss_fn, tensor)
            rel = (analytic - fd).norm() / max(float(fd.norm()), 1e-12)
            assert float(rel) < 1e-3


class TestFilterGenerator:
    def test_deterministic(self):
        torch.manual_seed(0)
        gen = FilterGenerator(8, 4, FilterSpec(4, 4, 3))
        feats = torch.randn(8, 5, 5)
        a, b = gen(feats), gen(feats)
        assert torch.equal(a.weights, b.weights)
        assert torch.equal(a.bias, b.bias)

    def test_desk_shape(self):
        gen = FilterGenerator(16, 64, FilterSpec(64, 64, 5))
        filt = gen(torch.randn(16, 4, 4))
        assert filt.weights.shape == (64, 1, 5, 5)
        assert filt.groups == 64
        assert filt.bias.shape == (64,)

    def test_spatially_global(self):
        # spatial permutations of the features yield the identical filter
        torch.manual_seed(1)
        gen = FilterGenerator(8, 4, FilterSpec(4, 4, 3))
        feats = torch.randn(8, 4, 4)
        shuffled = feats.reshape(8, -1)[:, torch.randperm(16)].reshape(8, 4, 4)
        a, b = gen(feats), gen(shuffled)
        assert torch.allclose(a.weights, b.weights, atol=1e-6)

    def test_channel_mismatch_rejected(self):
        gen = FilterGenerator(8, 4, FilterSpec(4, 4, 3))
        with pytest.raises(ValidationError):
            gen(torch.randn(6, 5, 5))

    def test_even_kernel_spec_rejected(self):
        with pytest.raises(ConfigError):
            FilterSpec(4, 4, 4)

    def test_indivisible_groups_rejected(self):
        with pytest.raises(ConfigError):
            FilterSpec(6, 4, 3)
