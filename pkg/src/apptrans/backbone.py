"""Frozen perceptual feature extractor feeding the appearance filter generator.

Two interchangeable backends behind one class: the default is a small random
conv stack (3 layers, stride 4 total) seeded deterministically, so nothing has
to be downloaded; optionally a weights file saved by save_backbone_weights can
be loaded for parity with an externally trained extractor. Parameters are
frozen either way: gradients flow through the activations (the generator needs
them) but never into the weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn

from .datamodel import ConfigError, ValidationError

MIN_INPUT = 8


@dataclass
class BackboneConfig:
    channels: int = 64
    seed: int = 7
    tap: str = "final"          # the desk backbone exposes only its final layer
    weights_path: Optional[str] = None


class FeatureBackbone(nn.Module):
    """3-layer conv stack, total stride 4, zero biases, parameters frozen."""

    stride = 4

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config or BackboneConfig()
        if self.config.tap != "final":
            raise ConfigError(f"unknown backbone tap {self.config.tap!r}; this backbone exposes 'final'")
        c = self.config.channels
        self.conv1 = nn.Conv2d(3, 32, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(32, 48, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(48, c, 3, stride=1, padding=1)
        self._init_weights(self.config.seed)
        if self.config.weights_path is not None:
            self.load_state_dict(torch.load(self.config.weights_path, weights_only=True))
        for p in self.parameters():
            p.requires_grad_(False)

    def _init_weights(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for conv in (self.conv1, self.conv2, self.conv3):
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
                conv.bias.zero_()

    @property
    def out_channels(self) -> int:
        return self.config.channels

    def extract(self, image: torch.Tensor) -> torch.Tensor:
        """Image (3,H,W) or (B,3,H,W) to a feature map at 1/4 resolution."""
        single = image.dim() == 3
        x = image.unsqueeze(0) if single else image
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValidationError(f"backbone expects 3-channel images, got shape {tuple(image.shape)}")
        if x.shape[-2] < MIN_INPUT or x.shape[-1] < MIN_INPUT:
            raise ValidationError(f"image {tuple(x.shape[-2:])} below backbone minimum {MIN_INPUT}")
        x = torch.relu(self.conv1(x))
        x = torch.relu(self.conv2(x))
        x = torch.relu(self.conv3(x))
        return x.squeeze(0) if single else x

    forward = extract


def save_backbone_weights(backbone: FeatureBackbone, path: str | Path) -> None:
    """Write the backbone state dict (the documented weights-file format)."""
    torch.save(backbone.state_dict(), Path(path))
