"""Open-vocabulary querying: text embedding + rendered latent image ->
relevancy map, binary mask, and peak-activation location.

The relevancy score follows the pairwise-softmax convention against a set of
canonical negative embeddings: the decoded per-pixel feature is unit-normalized
and scored as ``min over negatives of exp(c.q) / (exp(c.q) + exp(c.n))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lqc import LqcModel, decode
from .splat import RenderOutput


@dataclass
class QuerySpec:
    query_embedding: np.ndarray          # (C,), unit norm
    canonical_negatives: np.ndarray      # (M, C), unit rows, M >= 1
    threshold: float = 0.4
    level: str = "l"

    def validate(self) -> None:
        q = np.asarray(self.query_embedding, dtype=np.float64)
        negs = np.atleast_2d(np.asarray(self.canonical_negatives, dtype=np.float64))
        if q.ndim != 1:
            raise ValueError("query embedding must be a vector")
        if negs.shape[0] < 1 or negs.shape[1] != q.shape[0]:
            raise ValueError("need >= 1 canonical negative with matching channels")
        if abs(np.linalg.norm(q) - 1.0) > 1e-4:
            raise ValueError("query embedding must be unit-norm within 1e-4")
        if np.abs(np.linalg.norm(negs, axis=1) - 1.0).max() > 1e-4:
            raise ValueError("negatives must be unit-norm within 1e-4")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")


@dataclass
class RelevancyMap:
    values: np.ndarray   # (H, W) in [0, 1]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def relevancy_from_features(decoded: np.ndarray, spec: QuerySpec) -> RelevancyMap:
    """Score an already-decoded (H, W, C) feature image against the query."""
    spec.validate()
    c = np.asarray(decoded, dtype=np.float64)
    norms = np.linalg.norm(c, axis=-1, keepdims=True)
    nonzero = norms[..., 0] > 1e-12
    unit = np.where(nonzero[..., None], c / np.clip(norms, 1e-12, None), 0.0)
    q_dot = unit @ np.asarray(spec.query_embedding, dtype=np.float64)
    negs = np.atleast_2d(np.asarray(spec.canonical_negatives, dtype=np.float64))
    n_dot_max = (unit @ negs.T).max(axis=-1)
    # min over negatives of the pairwise softmax = sigmoid against the hardest one
    vals = _sigmoid(q_dot - n_dot_max)
    vals[~nonzero] = 0.0
    return RelevancyMap(values=vals)


def relevancy_map(render: RenderOutput, lqc: LqcModel, spec: QuerySpec) -> RelevancyMap:
    """Decode the rendered latent image per pixel and score it against the query."""
    if render.feature.shape[-1] != lqc.D:
        raise ValueError(f"rendered feature has {render.feature.shape[-1]} channels, compressor expects {lqc.D}")
    decoded = decode(lqc, render.feature.astype(np.float64))
    return relevancy_from_features(decoded, spec)


def mask_from_relevancy(rmap: RelevancyMap, threshold: float) -> np.ndarray:
    """Binary mask of pixels with relevancy >= threshold (possibly empty)."""
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return rmap.values >= threshold


def localize(rmap: RelevancyMap) -> tuple[int, int]:
    """(row, col) of the maximum activation; ties go to the smallest row, then column."""
    if rmap.values.size == 0:
        raise ValueError("empty relevancy map")
    flat = int(np.argmax(rmap.values))
    return flat // rmap.values.shape[1], flat % rmap.values.shape[1]
