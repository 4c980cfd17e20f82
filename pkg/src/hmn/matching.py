"""Bipartite matching of padded entity targets to predicted embeddings."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DegenerateVectorError, Tensor

log = logging.getLogger(__name__)


class InvalidCostError(ValueError):
    """The cost matrix is not square or holds non-finite entries."""


@dataclass(frozen=True)
class PaddedEntitySet:
    """Entity embeddings padded to ``N`` slots; ``mask[i]`` is False for padding."""

    embeddings: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if emb.ndim != 2 or mask.shape != (emb.shape[0],):
            raise ValueError(f"embeddings (N, d) and mask (N,) expected, got {emb.shape}, {mask.shape}")
        if np.any(np.linalg.norm(emb[mask], axis=1) == 0):
            raise DegenerateVectorError("real entity embeddings must have positive norm")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "mask", mask)

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    @classmethod
    def pad(cls, vectors, n_slots: int, width: int) -> "PaddedEntitySet":
        """Pad a list of entity vectors to ``n_slots``; extra entities are dropped."""
        vectors = list(vectors)
        if len(vectors) > n_slots:
            log.warning("%d entities exceed %d query slots; keeping the first %d",
                        len(vectors), n_slots, n_slots)
            vectors = vectors[:n_slots]
        emb = np.zeros((n_slots, width))
        mask = np.zeros(n_slots, dtype=bool)
        for i, vec in enumerate(vectors):
            emb[i] = vec
            mask[i] = True
        return cls(emb, mask)


@dataclass(frozen=True)
class Assignment:
    """Target slot ``i`` is paired with prediction ``sigma[i]``."""

    sigma: np.ndarray
    total_cost: float


def cost_matrix(targets: PaddedEntitySet, predictions) -> np.ndarray:
    """Masked cosine distances: entry ``(i, j)`` is ``1 - cos(n_i, e_j)`` or 0 for padding."""
    pred = predictions.data if isinstance(predictions, Tensor) else np.asarray(predictions, float)
    if pred.shape != targets.embeddings.shape:
        raise ValueError(f"predictions {pred.shape} do not match targets {targets.embeddings.shape}")
    pn = np.linalg.norm(pred, axis=1)
    if np.any(pn == 0):
        raise DegenerateVectorError("prediction row with zero norm")
    cost = np.zeros((targets.size, targets.size))
    real = targets.mask
    if real.any():
        t = targets.embeddings[real]
        cos = (t @ pred.T) / (np.linalg.norm(t, axis=1)[:, None] * pn[None, :])
        cost[real] = np.clip(1.0 - cos, 0.0, 2.0)
    return cost


def hungarian(C) -> Assignment:
    """Minimum-cost perfect assignment of a square matrix in O(N^3).

    Shortest augmenting paths with row/column potentials, one row at a time.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1] or C.shape[0] == 0:
        raise InvalidCostError(f"need a non-empty square matrix, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise InvalidCostError("cost matrix has non-finite entries")
    n = C.shape[0]
    # 1-based arrays; column 0 is the virtual source
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[j] = row assigned to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            reduced = C[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    sigma = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        sigma[match[j] - 1] = j - 1
    return Assignment(sigma, math.fsum(C[np.arange(n), sigma]))


def _safe_targets(embeddings: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # padding rows get a harmless unit vector; their cost is multiplied by 0
    safe = embeddings.copy()
    safe[~mask] = 0.0
    safe[~mask, 0] = 1.0
    return safe


def matched_distances(targets: PaddedEntitySet, predictions: Tensor, sigma) -> Tensor:
    """Per-slot masked cosine distance under a fixed assignment, shape ``(N,)``."""
    selected = ad.getitem(predictions, np.asarray(sigma))
    dist = ad.cosine_distance(Tensor(_safe_targets(targets.embeddings, targets.mask)), selected)
    return dist * targets.mask.astype(np.float64)


def entity_loss(targets: PaddedEntitySet, predictions: Tensor) -> Tensor:
    """Sum of matched distances; the assignment is a constant for differentiation."""
    predictions = ad.as_tensor(predictions)
    if targets.count == 0:
        return ad.tsum(predictions * 0.0)
    assignment = hungarian(cost_matrix(targets, predictions))
    return ad.tsum(matched_distances(targets, predictions, assignment.sigma))


def batched_entity_loss(targets: list[PaddedEntitySet], predictions: Tensor) -> Tensor:
    """Entity loss for each video of a ``(B, N, d_s)`` batch, shape ``(B,)``."""
    B, n, _ = predictions.shape
    sigma = np.tile(np.arange(n), (B, 1))
    for b, tgt in enumerate(targets):
        if tgt.count:
            sigma[b] = hungarian(cost_matrix(tgt, predictions.data[b])).sigma
    rows = np.repeat(np.arange(B), n).reshape(B, n)
    selected = ad.getitem(predictions, (rows, sigma))
    safe = np.stack([_safe_targets(t.embeddings, t.mask) for t in targets])
    mask = np.stack([t.mask for t in targets]).astype(np.float64)
    dist = ad.cosine_distance(Tensor(safe), selected)
    return ad.tsum(dist * mask, axis=-1)
