"""The parameterized networks: content encoder, image generator, image and
appearance patch discriminators, and the contrastive projection head.

No normalization layers anywhere in the content path: learned affine norm
statistics would leak appearance into content, and the adaptive filter is the
mechanism meant to carry appearance. Discriminators are 3-layer patch
discriminators emitting sigmoid probability maps.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import adaptive_conv
from .backbone import BackboneConfig, FeatureBackbone
from .datamodel import AppearanceFilter, ValidationError, validate_finite, validate_image

GEM_EPS = 1e-6


@dataclass
class ModelConfig:
    image_size: int = 64
    content_channels: int = 64
    embed_dim: int = 128
    filter_kernel: int = 5
    filter_bias: bool = True
    filter_hidden: int = 128
    backbone: BackboneConfig = field(default_factory=BackboneConfig)


def _as_batch(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    return (x.unsqueeze(0), True) if x.dim() == 3 else (x, False)


class ResidualBlock(nn.Module):
    def __init__(self, dim, norm=False):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)
        self.norm = nn.InstanceNorm2d(dim) if norm else nn.Identity()

    def forward(self, x):
        return x + self.conv2(torch.relu(self.norm(self.conv1(x))))


class ContentEncoder(nn.Module):
    """Stem + two stride-2 convs + two residual blocks; total stride 4.

    Affine-free instance normalization strips per-channel appearance
    statistics from the content path, so reconstruction can only recover an
    image's appearance through the filter pathway; the final block carries no
    normalization at all. The norm layers are parameter-free.
    """

    stride = 4

    def __init__(self, channels=64):
        super().__init__()
        half = max(channels // 2, 8)
        self.model = nn.Sequential(
            nn.Conv2d(3, half, 7, padding=3), nn.InstanceNorm2d(half), nn.ReLU(inplace=True),
            nn.Conv2d(half, channels, 3, stride=2, padding=1), nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, stride=2, padding=1), nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            ResidualBlock(channels, norm=True),
            ResidualBlock(channels),
        )

    def forward(self, x):
        return self.model(x)


class Generator(nn.Module):
    """Mirror of the encoder: residual blocks, nearest-neighbor upsampling, tanh.
    The output stage stays at kernel 3 to keep reconstructions sharp."""

    def __init__(self, channels=64):
        super().__init__()
        half = max(channels // 2, 8)
        self.model = nn.Sequential(
            ResidualBlock(channels),
            ResidualBlock(channels),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(channels, half, 3, padding=1), nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(half, half, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(half, 3, 3, padding=1),
            nn.Tanh(),
        )

    def forward(self, x):
        return self.model(x)


class PatchDiscriminator(nn.Module):
    """3 stride-2 convs to a sigmoid patch map; spatial shape = input / 8.
    Kept narrow: a wide discriminator just memorizes a desk-scale dataset."""

    stride = 8

    def __init__(self, in_channels=3):
        super().__init__()
        self.model = nn.Sequential(
            nn.Conv2d(in_channels, 16, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(16, 32, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(32, 64, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(64, 1, 3, padding=1),
            nn.Sigmoid(),
        )

    def forward(self, x):
        return self.model(x)


class GeMPool(nn.Module):
    """Generalized-mean pooling with a trainable exponent.

    GeM(x; p) = (mean over spatial of clamp(x, eps)^p)^(1/p); p=1 is average
    pooling, p -> inf approaches max pooling.
    """

    def __init__(self, p=3.0, eps=GEM_EPS):
        super().__init__()
        self.p = nn.Parameter(torch.tensor(float(p)))
        self.eps = eps

    def forward(self, x):
        pooled = x.clamp(min=self.eps).pow(self.p).mean(dim=(-2, -1))
        return pooled.pow(1.0 / self.p)


class ProjectionHead(nn.Module):
    """H: GeM pooling, two MLP layers, then L2 normalization.

    The head runs in float64 internally: near the 0.001-std init the
    pre-normalization vector can shrink to ~1e-12, where the 1/norm factors of
    the normalize/GeM backward overflow float32. The gradients are the exact
    ones either way; only the working precision changes.
    """

    def __init__(self, in_channels=64, embed_dim=128):
        super().__init__()
        self.gem = GeMPool()
        self.fc1 = nn.Linear(in_channels, in_channels)
        self.fc2 = nn.Linear(in_channels, embed_dim)

    def forward(self, f):
        x = f.double()
        pooled = x.clamp(min=self.gem.eps).pow(self.gem.p.double()).mean(dim=(-2, -1))
        pooled = pooled.pow(1.0 / self.gem.p.double())
        v = F.linear(torch.relu(F.linear(pooled, self.fc1.weight.double(), self.fc1.bias.double())),
                     self.fc2.weight.double(), self.fc2.bias.double())
        return F.normalize(v, p=2, dim=-1, eps=1e-30).to(f.dtype)


class TranslationModel(nn.Module):
    """All six trainable networks plus the frozen backbone, with the pipeline ops.

    Checkpoints carry exactly the six parameter collections (e_c, e_a, g, d_i,
    d_a, h); the backbone is rebuilt from its config.
    """

    COLLECTIONS = ("e_c", "e_a", "g", "d_i", "d_a", "h")

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        c = self.config.content_channels
        self.backbone = FeatureBackbone(self.config.backbone)
        spec = adaptive_conv.FilterSpec(
            out_channels=c, groups=c, kernel_size=self.config.filter_kernel,
            bias=self.config.filter_bias)
        self.content_encoder = ContentEncoder(c)
        self.filter_generator = adaptive_conv.FilterGenerator(
            self.backbone.out_channels, c, spec, hidden=self.config.filter_hidden)
        self.generator = Generator(c)
        self.image_disc = PatchDiscriminator(3)
        self.appearance_disc = PatchDiscriminator(6)
        self.head = ProjectionHead(c, self.config.embed_dim)

    # -- collection plumbing ------------------------------------------------

    def collection(self, name: str) -> nn.Module:
        return {
            "e_c": self.content_encoder,
            "e_a": self.filter_generator,
            "g": self.generator,
            "d_i": self.image_disc,
            "d_a": self.appearance_disc,
            "h": self.head,
        }[name]

    def parameter_collections(self) -> dict[str, list[tuple[str, torch.Tensor]]]:
        return {name: list(self.collection(name).named_parameters())
                for name in self.COLLECTIONS}

    def parameter_count_report(self) -> dict[str, int]:
        report = {name: sum(p.numel() for _, p in params)
                  for name, params in self.parameter_collections().items()}
        report["total"] = sum(report.values())
        return report

    def generator_side_parameters(self):
        for name in ("e_c", "e_a", "g", "h"):
            yield from self.collection(name).parameters()

    def discriminator_side_parameters(self):
        for name in ("d_i", "d_a"):
            yield from self.collection(name).parameters()

    # -- pipeline operations -------------------------------------------------

    def encode_content(self, image: torch.Tensor) -> torch.Tensor:
        x, single = _as_batch(image)
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValidationError(f"encode_content expects (3,H,W) images, got {tuple(image.shape)}")
        if x.shape[-2] % ContentEncoder.stride or x.shape[-1] % ContentEncoder.stride:
            raise ValidationError(
                f"image size {tuple(x.shape[-2:])} not divisible by encoder stride {ContentEncoder.stride}")
        out = self.content_encoder(x)
        return out.squeeze(0) if single else out

    def generate_image(self, f: torch.Tensor) -> torch.Tensor:
        x, single = _as_batch(f)
        if x.shape[1] != self.config.content_channels:
            raise ValidationError(
                f"generator expects {self.config.content_channels} channels, got {int(x.shape[1])}")
        out = self.generator(x)
        return out.squeeze(0) if single else out

    def discriminate_image(self, image: torch.Tensor) -> torch.Tensor:
        x, single = _as_batch(image)
        if x.shape[1] != 3:
            raise ValidationError("image discriminator expects 3-channel input")
        out = self.image_disc(x)
        return out.squeeze(0) if single else out

    def discriminate_appearance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        xa, single = _as_batch(a)
        xb, _ = _as_batch(b)
        if xa.shape != xb.shape:
            raise ValidationError(f"appearance pair size mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        out = self.appearance_disc(torch.cat([xa, xb], dim=1))
        return out.squeeze(0) if single else out

    def embed(self, f: torch.Tensor) -> torch.Tensor:
        validate_finite("content feature", f)
        x, single = _as_batch(f)
        out = self.head(x)
        return out.squeeze(0) if single else out

    def generate_filter(self, target_image: torch.Tensor) -> AppearanceFilter:
        return self.filter_generator(self.backbone.extract(target_image))

    def translate(self, source: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        validate_image(source, ContentEncoder.stride)
        validate_image(target, downsample_factor=1)
        return adaptive_conv.translate(source, target, self)

    @torch.no_grad()
    def embed_image(self, image: torch.Tensor):
        """Content-pathway retrieval descriptor (E_c then H) as float64 numpy."""
        return self.embed(self.encode_content(image)).cpu().double().numpy()


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path: str | Path, model: TranslationModel, *,
                    opt_d_state: Optional[dict] = None, opt_g_state: Optional[dict] = None,
                    epoch: int = -1, step: int = 0,
                    config_text: str = "", config_hash: str = "") -> None:
    """One archive: six parameter collections, optimizer state, counters,
    config echo + hash, model config."""
    payload = {
        "collections": {name: collection_state(model, name) for name in model.COLLECTIONS},
        "opt_d": opt_d_state,
        "opt_g": opt_g_state,
        "epoch": epoch,
        "step": step,
        "config_text": config_text,
        "config_hash": config_hash,
        "model_config": asdict(model.config),
    }
    torch.save(payload, Path(path))


def collection_state(model: TranslationModel, name: str) -> dict:
    return {k: v.detach().clone() for k, v in model.collection(name).state_dict().items()}


def load_checkpoint(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return torch.load(p, weights_only=True)


def model_from_checkpoint(ckpt: dict) -> TranslationModel:
    cfg_dict = dict(ckpt["model_config"])
    cfg_dict["backbone"] = BackboneConfig(**cfg_dict["backbone"])
    model = TranslationModel(ModelConfig(**cfg_dict))
    for name in model.COLLECTIONS:
        model.collection(name).load_state_dict(ckpt["collections"][name])
    return model


def config_text_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
