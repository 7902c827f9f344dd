"""Procedural multi-domain dataset with known geometry, appearances, and poses.

A scene is a small world of flat shapes placed around a cluster center; the
camera pose selects a world window (translation shifts it, yaw rotates it), so
nearby poses see overlapping content. An appearance domain is a channel-wise
affine recolor (tint / brightness / contrast) plus seeded noise, which keeps
the Sobel edge map of a scene invariant across domains by construction. That
edge map is the ground-truth content proxy used by the acceptance tests.

generate_dataset writes the contract manifest (poses carried only by reference
records) and a manifest_gt.jsonl sidecar carrying poses for every record; the
sidecar supplies query ground truth for localization evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .datamodel import (
    DatasetRecord,
    DomainLabel,
    PoseAnnotation,
    ValidationError,
    save_image,
    save_manifest,
)
from .seeding import derive_seed

BACKGROUND_SHADE = -0.85
WORLD_WINDOW_M = 16.0  # meters of world visible across one image side
EDGE_THRESHOLD = 1.2   # Sobel magnitude threshold on standardized luminance
DEFAULT_SIZE = (64, 64)


@dataclass(frozen=True)
class Primitive:
    """One flat shape in world coordinates (meters), painted in order."""

    kind: str                       # "rect" | "circle" | "polyline"
    points: tuple[tuple[float, float], ...]
    size: tuple[float, ...]         # rect: (w, h); circle: (r,); polyline: (thickness,)
    shade: float

    def __post_init__(self):
        if self.kind not in ("rect", "circle", "polyline"):
            raise ValidationError(f"unknown primitive kind {self.kind!r}")


@dataclass(frozen=True)
class SceneSpec:
    """A deterministic world layout plus the camera pose that views it."""

    seed: int
    layout: tuple[Primitive, ...]
    camera_pose: PoseAnnotation


@dataclass(frozen=True)
class AppearanceSpec:
    """Channel-wise affine recolor parameters for one appearance domain."""

    domain: DomainLabel
    global_tint: tuple[float, float, float] = (0.0, 0.0, 0.0)
    brightness: float = 0.0
    contrast: float = 1.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.contrast <= 0:
            raise ValidationError("contrast must be positive")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be non-negative")


@dataclass(frozen=True)
class PoseJitter:
    """Pose spread controls for generate_dataset.

    Scenes come in clusters of ``cluster_size`` sharing one world layout;
    within a cluster, poses are jittered by at most (rot_deg, trans_m) from the
    cluster base, and cluster bases are ``cluster_spacing_m`` apart. With all
    three magnitudes zero every scene gets the identical pose.
    """

    rot_deg: float = 3.0
    trans_m: float = 1.5
    cluster_size: int = 4
    cluster_spacing_m: float = 25.0

    def __post_init__(self):
        if self.rot_deg < 0 or self.trans_m < 0 or self.cluster_spacing_m < 0:
            raise ValidationError("jitter magnitudes must be non-negative")
        if self.cluster_size < 1:
            raise ValidationError("cluster_size must be >= 1")


def yaw_pose(yaw_deg: float, translation: tuple[float, float, float]) -> PoseAnnotation:
    """Pose rotating about +z by yaw_deg at the given translation."""
    half = math.radians(yaw_deg) / 2.0
    return PoseAnnotation(rotation=(math.cos(half), 0.0, 0.0, math.sin(half)),
                          translation=translation)


def _pose_yaw_rad(pose: PoseAnnotation) -> float:
    w, x, y, z = pose.rotation
    return 2.0 * math.atan2(z, w)


def build_layout(seed: int, center: tuple[float, float] = (0.0, 0.0),
                 n_primitives: int = 9) -> tuple[Primitive, ...]:
    """Deterministic layout of shapes scattered around a world center."""
    rng = np.random.default_rng(derive_seed("layout", seed))
    cx, cy = center
    spread = WORLD_WINDOW_M * 0.42
    prims: list[Primitive] = []
    for i in range(n_primitives):
        kind = ("rect", "circle", "polyline")[int(rng.integers(0, 3))]
        px = cx + float(rng.uniform(-spread, spread))
        py = cy + float(rng.uniform(-spread, spread))
        shade = float(rng.uniform(-0.55, 0.9))
        if kind == "rect":
            w = float(rng.uniform(2.0, 7.0))
            h = float(rng.uniform(2.0, 7.0))
            prims.append(Primitive("rect", ((px, py),), (w, h), shade))
        elif kind == "circle":
            r = float(rng.uniform(1.2, 3.5))
            prims.append(Primitive("circle", ((px, py),), (r,), shade))
        else:
            angle = float(rng.uniform(0, 2 * math.pi))
            length = float(rng.uniform(4.0, 12.0))
            qx = px + length * math.cos(angle)
            qy = py + length * math.sin(angle)
            thickness = float(rng.uniform(0.6, 1.6))
            prims.append(Primitive("polyline", ((px, py), (qx, qy)), (thickness,), shade))
    return tuple(prims)


def build_scene(seed: int, camera_pose: PoseAnnotation,
                world_center: tuple[float, float] = (0.0, 0.0)) -> SceneSpec:
    return SceneSpec(seed=seed, layout=build_layout(seed, world_center), camera_pose=camera_pose)


def _world_grid(pose: PoseAnnotation, size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """World (x, y) coordinates seen by each pixel of the camera window."""
    h, w = size
    u = (np.arange(w, dtype=np.float64) + 0.5) / w - 0.5
    v = (np.arange(h, dtype=np.float64) + 0.5) / h - 0.5
    uu, vv = np.meshgrid(u * WORLD_WINDOW_M, v * WORLD_WINDOW_M)
    yaw = _pose_yaw_rad(pose)
    cos_y, sin_y = math.cos(yaw), math.sin(yaw)
    tx, ty = pose.translation[0], pose.translation[1]
    wx = tx + cos_y * uu - sin_y * vv
    wy = ty + sin_y * uu + cos_y * vv
    return wx, wy


def _rasterize(layout: Sequence[Primitive], pose: PoseAnnotation,
               size: tuple[int, int]) -> np.ndarray:
    """Signed-distance rasterization with one-pixel anti-aliased borders.

    Band-limited edges keep the scenes learnable by conv decoders (real
    photographs are band-limited by optics) and make the Sobel edge maps
    stable under the appearance transforms.
    """
    wx, wy = _world_grid(pose, size)
    px = WORLD_WINDOW_M / size[1]  # world meters per pixel
    canvas = np.full(size, BACKGROUND_SHADE, dtype=np.float64)
    for prim in layout:
        if prim.kind == "rect":
            (cx, cy), (pw, ph) = prim.points[0], prim.size
            sdf = np.maximum(np.abs(wx - cx) - pw / 2, np.abs(wy - cy) - ph / 2)
        elif prim.kind == "circle":
            (cx, cy), (r,) = prim.points[0], prim.size
            sdf = np.hypot(wx - cx, wy - cy) - r
        else:
            (ax, ay), (bx, by) = prim.points
            half = prim.size[0] / 2
            abx, aby = bx - ax, by - ay
            denom = abx * abx + aby * aby
            if denom == 0:
                sdf = np.hypot(wx - ax, wy - ay) - half
            else:
                t = np.clip(((wx - ax) * abx + (wy - ay) * aby) / denom, 0.0, 1.0)
                sdf = np.hypot(wx - (ax + t * abx), wy - (ay + t * aby)) - half
        coverage = np.clip(0.5 - sdf / px, 0.0, 1.0)
        canvas = canvas * (1.0 - coverage) + prim.shade * coverage
    return canvas


def render(scene: SceneSpec, appearance: AppearanceSpec,
           size: tuple[int, int] = DEFAULT_SIZE) -> torch.Tensor:
    """Render a scene under one appearance; deterministic in all inputs.

    The same scene rendered under any noise-free appearance has the identical
    binarized edge map, because the appearance acts as a monotone channel-wise
    affine on a grayscale-structured base.
    """
    if not scene.layout:
        raise ValidationError("scene layout is empty")
    h, w = size
    if h < 8 or w < 8:
        raise ValidationError(f"render size {h}x{w} too small")
    base = _rasterize(scene.layout, scene.camera_pose, size)
    rgb = np.repeat(base[None, :, :], 3, axis=0)
    tint = np.asarray(appearance.global_tint, dtype=np.float64).reshape(3, 1, 1)
    out = appearance.contrast * rgb + appearance.brightness + tint
    if appearance.noise_sigma > 0:
        noise_seed = derive_seed(
            "render-noise", scene.seed,
            *scene.camera_pose.rotation, *scene.camera_pose.translation,
            appearance.domain.name, h, w,
        )
        rng = np.random.default_rng(noise_seed)
        out = out + appearance.noise_sigma * rng.standard_normal(out.shape)
    out = np.clip(out, -1.0, 1.0)
    return torch.from_numpy(out.astype(np.float32))


# ---------------------------------------------------------------------------
# edge maps (the ground-truth content proxy)

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T


def _conv3(gray: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    padded = np.pad(gray, 1, mode="edge")
    out = np.zeros_like(gray)
    for dy in range(3):
        for dx in range(3):
            out += kernel[dy, dx] * padded[dy:dy + gray.shape[0], dx:dx + gray.shape[1]]
    return out


def edge_map(image: torch.Tensor) -> np.ndarray:
    """Binary edge map: Sobel magnitude of standardized luminance, fixed threshold."""
    gray = image.detach().cpu().numpy().astype(np.float64).mean(axis=0)
    std = gray.std()
    gray = (gray - gray.mean()) / (std if std > 1e-8 else 1e-8)
    gx = _conv3(gray, _SOBEL_X)
    gy = _conv3(gray, _SOBEL_Y)
    return np.hypot(gx, gy) > EDGE_THRESHOLD


def edge_agreement(a: torch.Tensor, b: torch.Tensor) -> float:
    """Fraction of pixels whose binary edge labels agree between two images."""
    ea, eb = edge_map(a), edge_map(b)
    return float((ea == eb).mean())


# ---------------------------------------------------------------------------
# dataset generation

_PRESETS = [
    # (tint, brightness, contrast, noise_sigma); kept to symmetric moderate
    # excursions so every translation direction is reachable at desk scale
    ((0.0, 0.0, 0.0), 0.0, 1.0, 0.01),
    ((-0.20, -0.12, 0.08), -0.22, 0.72, 0.015),
    ((0.06, 0.06, 0.09), -0.05, 0.60, 0.01),
    ((-0.26, -0.20, -0.02), -0.30, 0.55, 0.02),
    ((0.05, -0.08, 0.12), 0.10, 0.85, 0.012),
]


def default_appearances(names: Sequence[str]) -> list[AppearanceSpec]:
    """Preset appearance for each named domain, cycling a small palette."""
    specs = []
    for i, name in enumerate(names):
        tint, brightness, contrast, noise = _PRESETS[i % len(_PRESETS)]
        specs.append(AppearanceSpec(
            domain=DomainLabel(name, i),
            global_tint=tint, brightness=brightness,
            contrast=contrast, noise_sigma=noise,
        ))
    return specs


def scene_poses(n_scenes: int, pose_jitter: PoseJitter, seed: int) -> list[PoseAnnotation]:
    """Clustered absolute poses: bases spaced apart, members jittered within thresholds."""
    rng = np.random.default_rng(derive_seed("poses", seed))
    poses = []
    for i in range(n_scenes):
        cluster = i // pose_jitter.cluster_size
        base_x = cluster * pose_jitter.cluster_spacing_m
        base_yaw = (cluster * 40.0) % 360.0 if pose_jitter.cluster_spacing_m > 0 else 0.0
        dx = float(rng.uniform(-pose_jitter.trans_m, pose_jitter.trans_m)) if pose_jitter.trans_m else 0.0
        dy = float(rng.uniform(-pose_jitter.trans_m, pose_jitter.trans_m)) if pose_jitter.trans_m else 0.0
        dyaw = float(rng.uniform(-pose_jitter.rot_deg, pose_jitter.rot_deg)) if pose_jitter.rot_deg else 0.0
        poses.append(yaw_pose(base_yaw + dyaw, (base_x + dx, dy, 0.0)))
    return poses


def scene_cluster(index: int, pose_jitter: PoseJitter) -> int:
    return index // pose_jitter.cluster_size


def build_scenes(n_scenes: int, pose_jitter: PoseJitter, seed: int,
                 pose_seed: int | None = None) -> list[SceneSpec]:
    """Scenes grouped into clusters that share a world layout (same place,
    different captures). A distinct pose_seed revisits the same places with
    fresh camera poses, like a new traversal of a known route."""
    poses = scene_poses(n_scenes, pose_jitter, seed if pose_seed is None else pose_seed)
    scenes = []
    for i, pose in enumerate(poses):
        cluster = scene_cluster(i, pose_jitter)
        layout_seed = derive_seed("scene-layout", seed, cluster)
        center = (cluster * pose_jitter.cluster_spacing_m, 0.0)
        scenes.append(build_scene(layout_seed, pose, center))
    return scenes


def generate_dataset(n_scenes: int, domains: Sequence[AppearanceSpec],
                     pose_jitter: PoseJitter, out_dir: str | Path,
                     size: tuple[int, int] = DEFAULT_SIZE, seed: int = 0) -> Path:
    """Render n_scenes under every domain and write images + manifests.

    The first domain is the reference category: only its records carry poses in
    the manifest. Returns the manifest path. A manifest_gt.jsonl sidecar with
    poses on every record is written next to it.
    """
    if n_scenes < 2:
        raise ValidationError("need at least 2 scenes")
    if len(domains) < 2:
        raise ValidationError("need at least 2 domains")
    names = [d.domain.name for d in domains]
    if len(set(names)) != len(names):
        raise ValidationError("domain names must be unique")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes = build_scenes(n_scenes, pose_jitter, seed)

    records: list[DatasetRecord] = []
    gt_records: list[DatasetRecord] = []
    for i, scene in enumerate(scenes):
        for d_idx, spec in enumerate(domains):
            img = render(scene, spec, size)
            name = f"scene{i:03d}_{spec.domain.name}.png"
            save_image(out / name, img)
            is_ref = d_idx == 0
            records.append(DatasetRecord(
                image_path=name, domain=spec.domain,
                pose=scene.camera_pose if is_ref else None,
                is_reference=is_ref,
            ))
            gt_records.append(DatasetRecord(
                image_path=name, domain=spec.domain,
                pose=scene.camera_pose, is_reference=is_ref,
            ))
    manifest_path = out / "manifest.jsonl"
    save_manifest(manifest_path, records)
    save_manifest(out / "manifest_gt.jsonl", gt_records)
    return manifest_path
