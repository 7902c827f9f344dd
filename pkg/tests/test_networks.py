import numpy as np
import pytest
import torch

from apptrans.backbone import BackboneConfig
from apptrans.datamodel import ValidationError
from apptrans.networks import (
    GeMPool,
    ModelConfig,
    TranslationModel,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)


def tiny_config():
    return ModelConfig(image_size=16, content_channels=8, embed_dim=16,
                       filter_kernel=3, filter_hidden=16,
                       backbone=BackboneConfig(channels=8, seed=1))


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return TranslationModel(tiny_config())


@pytest.fixture(scope="module")
def desk_model():
    torch.manual_seed(0)
    return TranslationModel(ModelConfig())


class TestEncodeContent:
    def test_shape_arithmetic(self, desk_model):
        f = desk_model.encode_content(torch.rand(3, 64, 64) * 2 - 1)
        assert f.shape == (64, 16, 16)

    def test_deterministic(self, model):
        img = torch.rand(3, 16, 16) * 2 - 1
        assert torch.equal(model.encode_content(img), model.encode_content(img))

    def test_indivisible_size_rejected(self, model):
        with pytest.raises(ValidationError):
            model.encode_content(torch.zeros(3, 18, 18))


class TestGenerateImage:
    def test_shape(self, desk_model):
        img = desk_model.generate_image(torch.randn(64, 16, 16))
        assert img.shape == (3, 64, 64)

    def test_range(self, model):
        for _ in range(3):
            img = model.generate_image(torch.randn(8, 4, 4) * 5).detach()
            assert float(img.min()) >= -1.0 and float(img.max()) <= 1.0

    def test_wrong_channels_rejected(self, model):
        with pytest.raises(ValidationError):
            model.generate_image(torch.randn(7, 4, 4))


class TestDiscriminators:
    def test_image_patch_shape(self, desk_model):
        out = desk_model.discriminate_image(torch.rand(3, 64, 64) * 2 - 1)
        assert out.shape == (1, 8, 8)

    def test_deterministic(self, model):
        img = torch.rand(3, 16, 16) * 2 - 1
        assert torch.equal(model.discriminate_image(img), model.discriminate_image(img))

    def test_probabilities_in_unit_interval(self, model):
        out = model.discriminate_image(torch.rand(3, 16, 16) * 2 - 1).detach()
        assert float(out.min()) > 0.0 and float(out.max()) < 1.0

    def test_appearance_pairs(self, model):
        x = torch.rand(3, 16, 16) * 2 - 1
        y = torch.rand(3, 16, 16) * 2 - 1
        assert model.discriminate_appearance(x, x).shape == (1, 2, 2)
        assert model.discriminate_appearance(x, y).shape == (1, 2, 2)

    def test_appearance_size_mismatch_rejected(self, model):
        with pytest.raises(ValidationError):
            model.discriminate_appearance(torch.zeros(3, 16, 16), torch.zeros(3, 32, 32))


class TestGeM:
    def test_p1_equals_average_pooling(self):
        gem = GeMPool(p=1.0)
        x = torch.rand(1, 4, 6, 6).double() + 0.5
        out = gem(x)
        avg = x.mean(dim=(-2, -1))
        assert torch.allclose(out, avg, atol=1e-12)

    def test_large_p_approaches_max(self):
        # one dominant positive value per channel on a 4x4 grid
        gem = GeMPool(p=100.0)
        x = torch.full((1, 3, 4, 4), 0.1, dtype=torch.float64)
        x[0, :, 1, 2] = 1.0
        out = gem(x.double())
        max_val = x.amax(dim=(-2, -1))
        assert torch.all((out - max_val).abs() / max_val < 0.05)

    def test_exponent_grad_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        x = torch.tensor(rng.uniform(0.1, 2.0, (1, 3, 4, 4)))
        gem = GeMPool(p=2.5)
        gem.double()
        probe = torch.tensor(rng.standard_normal((1, 3)))

        def fn():
            return (gem(x) * probe).sum()

        loss = fn()
        analytic = torch.autograd.grad(loss, gem.p)[0]
        eps = 1e-3
        with torch.no_grad():
            gem.p += eps
            hi = float(fn())
            gem.p -= 2 * eps
            lo = float(fn())
            gem.p += eps
        fd = (hi - lo) / (2 * eps)
        assert abs(float(analytic) - fd) / max(abs(fd), 1e-10) < 1e-3


class TestEmbed:
    def test_unit_norm(self, model):
        f = torch.randn(8, 4, 4)
        z = model.embed(f).detach()
        assert z.shape == (16,)
        assert abs(float(z.norm()) - 1.0) < 1e-5

    def test_non_finite_rejected(self, model):
        f = torch.randn(8, 4, 4)
        f[0, 0, 0] = float("inf")
        with pytest.raises(ValidationError):
            model.embed(f)

    def test_batched(self, model):
        f = torch.randn(2, 8, 4, 4)
        z = model.embed(f)
        assert z.shape == (2, 16)
        assert torch.allclose(z.norm(dim=1), torch.ones(2), atol=1e-5)


class TestModelPlumbing:
    def test_parameter_report_config_derived(self):
        a = TranslationModel(tiny_config()).parameter_count_report()
        b = TranslationModel(tiny_config()).parameter_count_report()
        assert a == b
        bigger = TranslationModel(ModelConfig()).parameter_count_report()
        assert bigger["total"] > a["total"]
        assert set(a) == {"e_c", "e_a", "g", "d_i", "d_a", "h", "total"}

    def test_collections_disjoint(self, model):
        colls = model.parameter_collections()
        seen = set()
        for name, params in colls.items():
            for pname, p in params:
                key = id(p)
                assert key not in seen
                seen.add(key)

    def test_translate_contract(self, model):
        src = torch.rand(3, 16, 16) * 2 - 1
        tgt = torch.rand(3, 16, 16) * 2 - 1
        out = model.translate(src, tgt).detach()
        assert out.shape == (3, 16, 16)
        assert float(out.min()) >= -1.0 and float(out.max()) <= 1.0

    def test_translate_validates_range(self, model):
        bad = torch.full((3, 16, 16), 2.0)
        with pytest.raises(ValidationError):
            model.translate(bad, torch.zeros(3, 16, 16))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        torch.manual_seed(4)
        model = TranslationModel(tiny_config())
        for p in model.parameters():
            if p.requires_grad:
                with torch.no_grad():
                    p.add_(torch.randn_like(p) * 0.01)
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, model, epoch=3, step=17, config_hash="abc")
        ckpt = load_checkpoint(path)
        assert ckpt["epoch"] == 3 and ckpt["step"] == 17 and ckpt["config_hash"] == "abc"
        restored = model_from_checkpoint(ckpt)
        img = torch.rand(3, 16, 16) * 2 - 1
        assert np.array_equal(model.embed_image(img), restored.embed_image(img))
        for name in model.COLLECTIONS:
            for (na, pa), (nb, pb) in zip(model.collection(name).named_parameters(),
                                          restored.collection(name).named_parameters()):
                assert na == nb
                assert torch.equal(pa, pb)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "none.pt")
