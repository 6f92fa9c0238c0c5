"""Distribution-stability cues.

Each participating client gets four numbers in ``[EPS_S, 1]``:

* ``S_R``  - inversion confidence (cosine of the reconstruction),
* ``S_cl`` - current vs. previous reconstruction features,
* ``S_cg`` - current features vs. the round's pooled features,
* ``S_lg`` - previous features vs. the round's pooled features.

Distances are kernel MMDs on penultimate-layer features of a small CNN that the
server trains on its own held-out split.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from . import models
from .data import Batch

EPS_S = 1e-6
BANDWIDTH_FACTORS = (0.5, 1.0, 2.0)
CUE_NAMES = ("S_R", "S_cl", "S_cg", "S_lg")


def sim_from_distance(d: float) -> float:
    """Map a distance in ``[0, inf)`` to a similarity in ``(2cos(1) - 1, 1]``."""
    if d < 0 or math.isnan(d):
        raise ValueError(f"distance must be non-negative, got {d}")
    return 2.0 * math.cos(math.tanh(d / 2.0)) - 1.0


def _sqdist(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    return np.maximum(d, 0.0)


def _kernel(x, y, bandwidths) -> np.ndarray:
    d = _sqdist(x, y)
    return sum(np.exp(-d / (2.0 * s * s)) for s in bandwidths)


def mmd(x, y, bandwidths) -> float:
    """Square root of the biased (V-statistic) MMD^2 under a sum of RBF kernels."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("MMD needs two non-empty sample sets")
    if not len(bandwidths):
        raise ValueError("need at least one kernel bandwidth")
    m2 = _kernel(x, x, bandwidths).mean() + _kernel(y, y, bandwidths).mean() - 2.0 * _kernel(x, y, bandwidths).mean()
    return math.sqrt(max(m2, 0.0))


def median_bandwidths(pooled, factors=BANDWIDTH_FACTORS) -> list[float]:
    """Median pairwise distance of ``pooled`` times each factor."""
    pooled = np.asarray(pooled, dtype=np.float64)
    d = np.sqrt(_sqdist(pooled, pooled))
    iu = np.triu_indices(len(pooled), k=1)
    med = float(np.median(d[iu])) if len(iu[0]) else 0.0
    if not med > 0:
        med = 1.0
    return [med * f for f in factors]


@dataclass
class FeatureExtractor:
    model: models.Model
    params: torch.Tensor

    @torch.no_grad()
    def __call__(self, images: torch.Tensor) -> np.ndarray:
        return self.model.features(self.params, images).double().numpy()


def train_feature_extractor(
    model: models.Model,
    root_split: Batch,
    seed: int = 0,
    epochs: int = 5,
    lr: float = 0.1,
    batch_size: int = 32,
    min_samples: int = 500,
) -> FeatureExtractor:
    """Train the classifier on the server's root split; keep its feature layer."""
    if len(root_split) < min_samples:
        raise ValueError(f"feature extractor needs >= {min_samples} samples, got {len(root_split)}")
    params = model.init_params(seed)
    for epoch in range(epochs):
        params = models.local_train(model, params, root_split, lr, None, batch_size, seed=seed * 1000 + epoch)
    return FeatureExtractor(model, params)


@dataclass
class HistoryStore:
    """Last-participation features and exclusion counters, keyed by client id."""

    features: dict[int, np.ndarray] = field(default_factory=dict)
    h: dict[int, int] = field(default_factory=dict)

    def counter(self, k: int) -> int:
        return self.h.get(k, 0)


@dataclass
class CueResult:
    state: np.ndarray  # (n, 4), rows ordered by descending S_R then id
    order: list[int]  # client id of each state row
    cues: dict[int, tuple[float, float, float, float]]
    bandwidths: list[float]


def build_cues(
    reconstructions: dict[int, torch.Tensor | None],
    similarities: dict[int, float],
    history: HistoryStore,
    extractor: Callable[[torch.Tensor], np.ndarray],
    bandwidths=None,
    factors=BANDWIDTH_FACTORS,
) -> CueResult:
    """Compute every participating client's cue row and roll the history forward.

    ``reconstructions`` maps client id to reconstructed images (``None`` when the
    inversion failed: that client gets floor cues and keeps its old history).
    ``similarities`` holds each client's raw inversion cosine.
    """
    if not reconstructions:
        raise ValueError("no client reconstructions")
    current = {k: np.asarray(extractor(img), dtype=np.float64) for k, img in reconstructions.items() if img is not None}
    previous = {k: history.features.get(k, current[k]) for k in current}
    cues: dict[int, tuple[float, float, float, float]] = {}
    bw = list(bandwidths) if bandwidths is not None else []
    if current:
        pooled_global = np.concatenate([current[k] for k in sorted(current)])
        if bandwidths is None:
            everything = np.concatenate([pooled_global] + [previous[k] for k in sorted(previous)])
            bw = median_bandwidths(everything, factors)
        for k in sorted(current):
            s_r = float(np.clip(similarities[k], EPS_S, 1.0))
            s_cl = sim_from_distance(mmd(current[k], previous[k], bw))
            s_cg = sim_from_distance(mmd(current[k], pooled_global, bw))
            s_lg = sim_from_distance(mmd(previous[k], pooled_global, bw))
            cues[k] = (s_r, *(float(np.clip(s, EPS_S, 1.0)) for s in (s_cl, s_cg, s_lg)))
    for k, img in reconstructions.items():
        if img is None:
            cues[k] = (EPS_S,) * 4
    history.features.update(current)
    order = sorted(cues, key=lambda k: (-cues[k][0], k))
    state = np.array([cues[k] for k in order], dtype=np.float64)
    return CueResult(state, order, cues, bw)
