"""Training pair construction: pose-thresholded positive/negative mining among
reference images, seeded NCE negative sampling, and the epoch-refreshed
source-target assignments by embedding similarity.

Similarity is the dot product of unit-norm embeddings (equals cosine). All
desk-scale search is exact O(n^2); every operation is deterministic given its
inputs and seed, with ties broken toward the lowest index.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .datamodel import DatasetRecord, Embedding, ValidationError, pose_distance


@dataclass(frozen=True)
class PairAssignment:
    """A source paired with its most-similar cross-domain target."""

    source_idx: int
    target_idx: int
    similarity: float

    def __post_init__(self):
        if self.source_idx == self.target_idx:
            raise ValidationError("a record cannot be assigned to itself")


@dataclass(frozen=True)
class MinedPairs:
    """Per-query mining result over the candidate shortlist."""

    query_idx: int
    positives: tuple[int, ...]
    negatives: tuple[int, ...]


def _to_matrix(embeddings, n_expected: int) -> np.ndarray:
    if isinstance(embeddings, torch.Tensor):
        mat = embeddings.detach().cpu().double().numpy()
    elif isinstance(embeddings, np.ndarray):
        mat = embeddings.astype(np.float64)
    else:
        rows = [e.values if isinstance(e, Embedding) else np.asarray(e, dtype=np.float64)
                for e in embeddings]
        mat = np.stack(rows) if rows else np.zeros((0, 0))
    if mat.ndim != 2 or mat.shape[0] != n_expected:
        raise ValidationError(
            f"need one embedding per record: got {mat.shape} for {n_expected} records")
    return mat


def mine_positives(records: Sequence[DatasetRecord], embeddings,
                   k_candidates: int = 20, rot_thresh_deg: float = 8.0,
                   trans_thresh_m: float = 7.0) -> list[MinedPairs]:
    """For each query, shortlist its k most embedding-similar references, then
    split the shortlist by pose: within BOTH thresholds is positive, the rest
    negative. The query never appears in its own shortlist."""
    n = len(records)
    mat = _to_matrix(embeddings, n)
    for r in records:
        if r.pose is None:
            raise ValidationError(f"record {r.image_path!r} lacks a pose; mining needs poses")
    sims = mat @ mat.T
    results = []
    k = min(k_candidates, n - 1)
    for q in range(n):
        order = np.lexsort((np.arange(n), -sims[q]))
        candidates = [int(j) for j in order if j != q][:k]
        pos, neg = [], []
        for j in candidates:
            angle, dist = pose_distance(records[q].pose, records[j].pose)
            if angle <= rot_thresh_deg and dist <= trans_thresh_m:
                pos.append(j)
            else:
                neg.append(j)
        results.append(MinedPairs(q, tuple(pos), tuple(neg)))
    return results


def sample_nce_negatives(query_idx: int, records: Sequence[DatasetRecord],
                         n_neg: int, rng_seed: int,
                         exclude: Sequence[int] = ()) -> list[int]:
    """n_neg distinct indices, never the query or its positives, reproducible
    from the seed."""
    n = len(records)
    if n <= n_neg:
        raise ValidationError(f"dataset of {n} records cannot supply {n_neg} negatives")
    banned = set(exclude) | {query_idx}
    pool = [i for i in range(n) if i not in banned]
    if len(pool) < n_neg:
        raise ValidationError(
            f"only {len(pool)} candidates remain after exclusions, need {n_neg}")
    return random.Random(rng_seed).sample(pool, n_neg)


def refresh_source_target(records: Sequence[DatasetRecord],
                          embeddings) -> list[PairAssignment]:
    """Pair every source with its most-similar record from a different domain
    (ties to the lowest index); recomputed at each epoch boundary by the trainer."""
    n = len(records)
    if n < 2:
        raise ValidationError("need at least 2 records to build assignments")
    mat = _to_matrix(embeddings, n)
    sims = mat @ mat.T
    assignments = []
    for i in range(n):
        best_j, best_s = -1, None
        for j in range(n):
            if records[j].domain.name == records[i].domain.name:
                continue
            s = float(sims[i, j])
            if best_s is None or s > best_s:
                best_j, best_s = j, s
        if best_s is None:
            raise ValidationError(
                f"record {records[i].image_path!r} has no cross-domain candidate")
        assignments.append(PairAssignment(i, best_j, best_s))
    return assignments
