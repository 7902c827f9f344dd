"""Retrieval-based visual localization and recall-at-threshold reporting.

A query is localized to the pose of the reference with the highest embedding
similarity (content pathway: E_c then H). A query counts toward a bucket only
when BOTH its translation and rotation errors are within that bucket's bounds;
the three buckets are nested, so recall is monotone non-decreasing across them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .datamodel import Embedding, PoseAnnotation, ValidationError, pose_distance

BUCKETS: tuple[tuple[float, float], ...] = ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))


@dataclass(frozen=True)
class Query:
    image: torch.Tensor
    pose: PoseAnnotation
    group: str = "all"


@dataclass
class RecallReport:
    """Per-group recall fractions at the three nested (meters, degrees) buckets."""

    per_group: dict[str, tuple[float, float, float]]
    counts: dict[str, int]
    buckets: tuple[tuple[float, float], ...] = BUCKETS

    def __post_init__(self):
        for group, recalls in self.per_group.items():
            prev = 0.0
            for r in recalls:
                if not 0.0 <= r <= 1.0:
                    raise ValidationError(f"recall {r} for group {group!r} outside [0, 1]")
                if r < prev - 1e-12:
                    raise ValidationError(
                        f"recalls for group {group!r} not monotone across nested buckets: {recalls}")
                prev = r

    def to_json(self) -> str:
        return json.dumps({
            "buckets": [{"trans_m": b[0], "rot_deg": b[1]} for b in self.buckets],
            "groups": {g: {"recalls": list(r), "queries": self.counts[g]}
                       for g, r in self.per_group.items()},
        }, indent=2, sort_keys=True)

    def format_table(self) -> str:
        header = "group".ljust(16) + "".join(
            f"{b[0]:g}m/{b[1]:g}deg".rjust(14) for b in self.buckets) + "queries".rjust(10)
        lines = [header, "-" * len(header)]
        for group in sorted(self.per_group):
            recalls = self.per_group[group]
            lines.append(group.ljust(16)
                         + "".join(f"{100 * r:13.1f}%" for r in recalls)
                         + f"{self.counts[group]:10d}")
        return "\n".join(lines)


def _embedding_vector(e) -> np.ndarray:
    if isinstance(e, Embedding):
        return e.values
    if isinstance(e, torch.Tensor):
        return e.detach().cpu().double().numpy()
    return np.asarray(e, dtype=np.float64)


def localize(query: torch.Tensor, reference_db: Sequence[tuple[object, PoseAnnotation]],
             model) -> PoseAnnotation:
    """Pose of the reference most similar to the query's embedding, ties to the
    lowest index."""
    if len(reference_db) == 0:
        raise ValidationError("reference database is empty")
    q = np.asarray(model.embed_image(query), dtype=np.float64)
    best_idx, best_sim = 0, None
    for i, (emb, _) in enumerate(reference_db):
        sim = float(np.dot(q, _embedding_vector(emb)))
        if best_sim is None or sim > best_sim:
            best_idx, best_sim = i, sim
    return reference_db[best_idx][1]


def build_reference_db(images: Sequence[torch.Tensor], poses: Sequence[PoseAnnotation],
                       model) -> list[tuple[np.ndarray, PoseAnnotation]]:
    if len(images) != len(poses):
        raise ValidationError("need one pose per reference image")
    return [(model.embed_image(img), pose) for img, pose in zip(images, poses)]


def evaluate(queries: Sequence[Query], reference_db: Sequence[tuple[object, PoseAnnotation]],
             model) -> RecallReport:
    """Localize every query, score pose errors against the nested buckets, and
    report recall per query group."""
    hits: dict[str, list[int]] = {}
    counts: dict[str, int] = {}
    for query in queries:
        estimated = localize(query.image, reference_db, model)
        angle, dist = pose_distance(estimated, query.pose)
        group_hits = hits.setdefault(query.group, [0] * len(BUCKETS))
        counts[query.group] = counts.get(query.group, 0) + 1
        for b, (trans_thresh, rot_thresh) in enumerate(BUCKETS):
            if dist <= trans_thresh and angle <= rot_thresh:
                group_hits[b] += 1
    per_group = {g: tuple(h / counts[g] for h in hs) for g, hs in hits.items()}
    return RecallReport(per_group=per_group, counts=counts)
