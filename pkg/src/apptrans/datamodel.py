"""Shared domain types, validation contracts, and the dataset manifest format.

Conventions used across the package:
  * images are float32 torch tensors of shape (3, H, W) with values in [-1, 1];
    the HxWx3 layout only exists on disk (8-bit PNG)
  * poses are absolute world-frame (unit quaternion + translation in meters)
  * the manifest is line-delimited JSON, one record per line, UTF-8, LF endings
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image as PILImage

PIXEL_MIN = -1.0
PIXEL_MAX = 1.0
QUAT_NORM_TOL = 1e-6
EMBED_NORM_TOL = 1e-5


class ValidationError(ValueError):
    """An input violated a documented contract."""


class ConfigError(ValueError):
    """A configuration value is unusable (even kernel, impossible shape, ...)."""


class ManifestParseError(ValueError):
    """A manifest line could not be decoded; carries the 1-based line number."""

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"manifest line {line_no}: {reason}")
        self.line_no = line_no


class TrainingAbort(RuntimeError):
    """Training hit a non-finite loss, gradient, or parameter; names the culprit."""


# ---------------------------------------------------------------------------
# image contract


def validate_image(pixels: torch.Tensor, downsample_factor: int = 1) -> None:
    """Check the image contract: (3, H, W), finite, in [-1, 1], H and W
    divisible by the encoder's total downsampling factor."""
    if not isinstance(pixels, torch.Tensor) or pixels.dim() != 3 or pixels.shape[0] != 3:
        raise ValidationError(f"image must be a (3, H, W) tensor, got {tuple(getattr(pixels, 'shape', ()))}")
    if not torch.isfinite(pixels).all():
        raise ValidationError("image contains non-finite values")
    lo, hi = float(pixels.min()), float(pixels.max())
    if lo < PIXEL_MIN - 1e-6 or hi > PIXEL_MAX + 1e-6:
        raise ValidationError(f"image values outside [{PIXEL_MIN}, {PIXEL_MAX}]: min={lo}, max={hi}")
    h, w = int(pixels.shape[1]), int(pixels.shape[2])
    if h % downsample_factor or w % downsample_factor:
        raise ValidationError(f"image size {h}x{w} not divisible by downsampling factor {downsample_factor}")


def validate_finite(name: str, values: torch.Tensor) -> None:
    if not torch.isfinite(values).all():
        raise ValidationError(f"{name} contains non-finite values")


def image_to_u8(pixels: torch.Tensor) -> np.ndarray:
    """[-1, 1] CHW float tensor to HxWx3 uint8 via the linear map."""
    arr = pixels.detach().cpu().numpy()
    arr = np.clip((arr + 1.0) * 127.5, 0.0, 255.0)
    return np.round(arr).astype(np.uint8).transpose(1, 2, 0)


def u8_to_image(arr: np.ndarray) -> torch.Tensor:
    """HxWx3 uint8 to a [-1, 1] CHW float32 tensor."""
    t = torch.from_numpy(arr.astype(np.float32).transpose(2, 0, 1))
    return t / 127.5 - 1.0


def save_image(path: str | Path, pixels: torch.Tensor) -> None:
    PILImage.fromarray(image_to_u8(pixels)).save(Path(path), format="PNG")


def load_image(path: str | Path, downsample_factor: int = 1) -> torch.Tensor:
    """Load an 8-bit image into the [-1, 1] CHW contract, validating on the way in."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"image file not found: {p}")
    arr = np.asarray(PILImage.open(p).convert("RGB"))
    img = u8_to_image(arr)
    validate_image(img, downsample_factor)
    return img


# ---------------------------------------------------------------------------
# value types


@dataclass(frozen=True)
class DomainLabel:
    """A named appearance domain with its dataset-local integer index."""

    name: str
    id: int

    def __post_init__(self):
        if not self.name:
            raise ValidationError("domain name must be non-empty")
        if self.id < 0:
            raise ValidationError("domain id must be non-negative")


@dataclass(frozen=True)
class PoseAnnotation:
    """Absolute capture pose: unit quaternion (w, x, y, z) + translation in meters."""

    rotation: tuple[float, float, float, float]
    translation: tuple[float, float, float]

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        if q.shape != (4,):
            raise ValidationError("rotation must be a (w, x, y, z) quaternion")
        n = float(np.linalg.norm(q))
        if abs(n - 1.0) > QUAT_NORM_TOL:
            raise ValidationError(f"quaternion norm {n} deviates from 1 by more than {QUAT_NORM_TOL}")
        if len(self.translation) != 3:
            raise ValidationError("translation must be a 3-vector")
        object.__setattr__(self, "rotation", tuple(float(v) for v in self.rotation))
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))


def pose_distance(a: PoseAnnotation, b: PoseAnnotation) -> tuple[float, float]:
    """Geodesic rotation angle in degrees plus Euclidean translation distance.

    The angle is 2*acos(|<q_a, q_b>|), the relative-rotation geodesic on the
    quaternion double cover, always in [0, 180]. Symmetric by construction.
    """
    qa = np.asarray(a.rotation, dtype=np.float64)
    qb = np.asarray(b.rotation, dtype=np.float64)
    for q in (qa, qb):
        if abs(float(np.linalg.norm(q)) - 1.0) > QUAT_NORM_TOL:
            raise ValidationError("pose_distance requires unit quaternions")
    if np.array_equal(qa, qb) or np.array_equal(qa, -qb):
        # identical rotations must give exactly 0, which acos(sum of squares)
        # misses by an ulp when the stored norm is not exactly 1
        angle_deg = 0.0
    else:
        dot = min(abs(float(np.dot(qa, qb))), 1.0)
        angle_deg = math.degrees(2.0 * math.acos(dot))
    ta = np.asarray(a.translation, dtype=np.float64)
    tb = np.asarray(b.translation, dtype=np.float64)
    dist_m = float(np.linalg.norm(ta - tb))
    return angle_deg, dist_m


@dataclass(frozen=True)
class DatasetRecord:
    """One manifest row: an image path, its domain, and (for reference images) a pose."""

    image_path: str
    domain: DomainLabel
    pose: Optional[PoseAnnotation] = None
    is_reference: bool = False

    def __post_init__(self):
        if self.is_reference and self.pose is None:
            raise ValidationError(f"reference record {self.image_path!r} lacks a pose annotation")


@dataclass(frozen=True)
class AppearanceFilter:
    """Grouped convolution weights encoding one target appearance.

    weights has shape (c_out, c_in_per_group, k, k); applied to content features
    with ``groups`` groups, so c_in_per_group * groups must equal the content
    channel count. The paper-scale default is the depthwise case
    groups = c = 256, c_in_per_group = 1, k = 5.
    """

    weights: torch.Tensor
    groups: int
    bias: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.weights.dim() != 4:
            raise ValidationError(f"filter weights must be 4D, got shape {tuple(self.weights.shape)}")
        if self.groups < 1:
            raise ValidationError("groups must be positive")
        c_out = int(self.weights.shape[0])
        if c_out % self.groups:
            raise ValidationError(f"c_out={c_out} not divisible by groups={self.groups}")
        if not torch.isfinite(self.weights).all():
            raise ValidationError("filter weights contain non-finite values")
        if self.bias is not None:
            if self.bias.shape != (c_out,):
                raise ValidationError(f"bias must have shape ({c_out},), got {tuple(self.bias.shape)}")
            if not torch.isfinite(self.bias).all():
                raise ValidationError("filter bias contains non-finite values")

    @property
    def kernel_size(self) -> int:
        return int(self.weights.shape[-1])

    @property
    def in_channels(self) -> int:
        return int(self.weights.shape[1]) * self.groups

    def flat_weights(self) -> torch.Tensor:
        return self.weights.reshape(-1)


@dataclass
class Embedding:
    """Unit-norm K-vector from the contrastive head."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValidationError("embedding must be a 1D vector")
        if not np.isfinite(v).all():
            raise ValidationError("embedding contains non-finite values")
        n = float(np.linalg.norm(v))
        if abs(n - 1.0) > EMBED_NORM_TOL:
            raise ValidationError(f"embedding norm {n} deviates from 1 by more than {EMBED_NORM_TOL}")
        self.values = v


@dataclass
class HyperParams:
    """Training hyperparameters with their published defaults."""

    m_c: float = 0.1
    tau: float = 0.07
    n_neg: int = 16
    beta_rs: float = 100.0
    beta_rc: float = 100.0
    beta_cc: float = 10.0
    beta_ca: float = 1.0
    beta_nce: float = 1.0
    filter_k: int = 5
    rot_thresh_deg: float = 8.0
    trans_thresh_m: float = 7.0
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    lr: float = 2e-4
    epochs_flat: int = 35
    epochs_decay: int = 15
    batch_size: int = 1
    init_std: float = 0.001

    def __post_init__(self):
        for name in ("m_c", "tau", "beta_rs", "beta_rc", "beta_cc", "beta_ca", "beta_nce",
                     "rot_thresh_deg", "trans_thresh_m", "adam_beta1", "adam_beta2",
                     "lr", "init_std"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"hyperparameter {name} must be positive")
        for name in ("n_neg", "filter_k", "epochs_flat", "epochs_decay", "batch_size"):
            if getattr(self, name) < 1:
                raise ValidationError(f"hyperparameter {name} must be >= 1")


# ---------------------------------------------------------------------------
# manifest IO
#
# One JSON object per line:
#   {"path": str, "domain": str, "reference": bool,
#    "pose": {"q": [w, x, y, z], "t": [x, y, z]}}   # pose optional
# Domain ids are assigned by first appearance order at load time.


def _record_to_json(record: DatasetRecord) -> str:
    obj: dict = {
        "path": record.image_path,
        "domain": record.domain.name,
        "reference": record.is_reference,
    }
    if record.pose is not None:
        obj["pose"] = {"q": list(record.pose.rotation), "t": list(record.pose.translation)}
    return json.dumps(obj)


def save_manifest(path: str | Path, records: Sequence[DatasetRecord]) -> None:
    """Write records as line-delimited JSON (UTF-8, LF endings)."""
    lines = [_record_to_json(r) for r in records]
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def load_manifest(path: str | Path) -> list[DatasetRecord]:
    """Load and validate a manifest, assigning domain ids by first appearance.

    Raises FileNotFoundError for a missing file, ManifestParseError (with the
    line number) for undecodable lines, and ValidationError when a record
    violates its invariants (e.g. a reference record without a pose).
    """
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"manifest not found: {p}")
    records: list[DatasetRecord] = []
    domain_ids: dict[str, int] = {}
    for line_no, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ManifestParseError(line_no, f"invalid JSON ({e.msg})") from e
        if not isinstance(obj, dict):
            raise ManifestParseError(line_no, "record is not a JSON object")
        try:
            image_path = obj["path"]
            domain_name = obj["domain"]
            is_reference = bool(obj["reference"])
        except KeyError as e:
            raise ManifestParseError(line_no, f"missing key {e.args[0]!r}") from e
        if not isinstance(image_path, str) or not isinstance(domain_name, str):
            raise ManifestParseError(line_no, "path and domain must be strings")
        if domain_name not in domain_ids:
            domain_ids[domain_name] = len(domain_ids)
        pose = None
        if "pose" in obj and obj["pose"] is not None:
            pose_obj = obj["pose"]
            try:
                q = tuple(float(v) for v in pose_obj["q"])
                t = tuple(float(v) for v in pose_obj["t"])
            except (KeyError, TypeError, ValueError) as e:
                raise ManifestParseError(line_no, f"malformed pose: {e}") from e
            pose = PoseAnnotation(rotation=q, translation=t)
        records.append(DatasetRecord(
            image_path=image_path,
            domain=DomainLabel(domain_name, domain_ids[domain_name]),
            pose=pose,
            is_reference=is_reference,
        ))
    return records
