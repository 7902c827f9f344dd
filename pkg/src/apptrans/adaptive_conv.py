"""Appearance-adaptive convolution: generate a filter from a target image's
features and apply it to content features by grouped 2D convolution.

The filter is global per target image: an average-pooling stage removes the
spatial dimensions of the backbone features before two fully-connected layers
emit the flattened weights (plus optional per-channel bias), which are
reshaped to (c_out, c_in_per_group, k, k). The paper-scale shape is the
depthwise case (256, 1, 5, 5) with 256 groups.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import AppearanceFilter, ConfigError, ValidationError


@dataclass(frozen=True)
class FilterSpec:
    """Shape contract for generated appearance filters."""

    out_channels: int
    groups: int
    kernel_size: int
    bias: bool = True

    def __post_init__(self):
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd for 'same' padding, got {self.kernel_size}")
        if self.out_channels < 1 or self.groups < 1:
            raise ConfigError("out_channels and groups must be positive")
        if self.out_channels % self.groups:
            raise ConfigError(f"out_channels={self.out_channels} not divisible by groups={self.groups}")

    def in_per_group(self, content_channels: int) -> int:
        if content_channels % self.groups:
            raise ConfigError(f"content channels {content_channels} not divisible by groups {self.groups}")
        return content_channels // self.groups


class FilterGenerator(nn.Module):
    """E_a: backbone features -> global average pool -> 2 FC layers -> filter."""

    def __init__(self, in_channels: int, content_channels: int, spec: FilterSpec,
                 hidden: int = 128):
        super().__init__()
        self.in_channels = in_channels
        self.spec = spec
        c_in_pg = spec.in_per_group(content_channels)
        self.weight_numel = spec.out_channels * c_in_pg * spec.kernel_size ** 2
        self.bias_numel = spec.out_channels if spec.bias else 0
        self._c_in_pg = c_in_pg
        self.fc1 = nn.Linear(in_channels, hidden)
        self.fc2 = nn.Linear(hidden, self.weight_numel + self.bias_numel)

    def forward(self, features: torch.Tensor) -> AppearanceFilter:
        if features.dim() == 4:
            if features.shape[0] != 1:
                raise ValidationError("filter generation is per target image (batch of 1)")
            features = features.squeeze(0)
        if features.dim() != 3 or features.shape[0] != self.in_channels:
            raise ValidationError(
                f"expected features ({self.in_channels}, h, w), got {tuple(features.shape)}")
        pooled = features.mean(dim=(1, 2))
        out = self.fc2(torch.relu(self.fc1(pooled)))
        k = self.spec.kernel_size
        weights = out[:self.weight_numel].reshape(
            self.spec.out_channels, self._c_in_pg, k, k)
        bias = out[self.weight_numel:] if self.spec.bias else None
        return AppearanceFilter(weights=weights, groups=self.spec.groups, bias=bias)


def apply_filter(f: torch.Tensor, w: AppearanceFilter) -> torch.Tensor:
    """Grouped 2D convolution of content features with 'same' zero padding.

    Accepts (c, h, w) or (B, c, h, w); output has w.out channels at the same
    spatial size. Linear in f for fixed w and linear in (weights, bias) for
    fixed f.
    """
    k = w.kernel_size
    if k % 2 == 0:
        raise ConfigError(f"kernel size must be odd for 'same' padding, got {k}")
    single = f.dim() == 3
    x = f.unsqueeze(0) if single else f
    if x.dim() != 4:
        raise ValidationError(f"content features must be (c, h, w) or (B, c, h, w), got {tuple(f.shape)}")
    if int(x.shape[1]) != w.in_channels:
        raise ValidationError(
            f"feature channels {int(x.shape[1])} do not match filter input {w.in_channels} "
            f"(groups={w.groups}, c_in_per_group={int(w.weights.shape[1])})")
    out = F.conv2d(x, w.weights, w.bias, stride=1, padding=k // 2, groups=w.groups)
    return out.squeeze(0) if single else out


def block_diagonal_expansion(w: AppearanceFilter) -> torch.Tensor:
    """Full (non-grouped) weight tensor equivalent to the grouped filter.

    Output channel o only connects to the input channels of its own group; all
    other taps are zero. apply_filter(f, w) equals a plain convolution with
    this expansion.
    """
    c_out, c_in_pg, k, _ = w.weights.shape
    c_in = c_in_pg * w.groups
    out_per_group = c_out // w.groups
    full = torch.zeros(c_out, c_in, k, k, dtype=w.weights.dtype)
    for o in range(c_out):
        g = o // out_per_group
        full[o, g * c_in_pg:(g + 1) * c_in_pg] = w.weights[o]
    return full


def statistics_filter(source_mean: torch.Tensor, source_std: torch.Tensor,
                      target_mean: torch.Tensor, target_std: torch.Tensor) -> AppearanceFilter:
    """The fixed 1x1 depthwise filter that reproduces channel-wise statistic
    transfer: weight_i = target_std_i / source_std_i and
    bias_i = target_mean_i - weight_i * source_mean_i."""
    scale = target_std / source_std
    bias = target_mean - scale * source_mean
    c = scale.numel()
    return AppearanceFilter(weights=scale.reshape(c, 1, 1, 1), groups=c, bias=bias)


def translate(source: torch.Tensor, target: torch.Tensor, model) -> torch.Tensor:
    """Render the source's content under the target's appearance:
    G(E_c(source) conv E_a(target))."""
    f = model.encode_content(source)
    w = model.generate_filter(target)
    return model.generate_image(apply_filter(f, w))
