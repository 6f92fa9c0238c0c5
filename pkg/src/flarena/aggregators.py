"""Aggregation rules: FedAvg plus the robust baselines (Krum, median, clipping,
clipped median, FLTrust).

The functional forms take a list of flat parameter vectors; the ``*Defense``
classes wrap them with the common ``aggregate(global_params, updates, info)``
signature used by the round loop.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import models
from .data import Batch
from .inversion import cosine

# relative slack when comparing Krum scores; float summation order should not
# decide between mathematically tied candidates
_TIE_RTOL = 1e-9


def _stack(updates) -> np.ndarray:
    if len(updates) == 0:
        raise ValueError("no updates to aggregate")
    return np.stack([np.asarray(u.detach().cpu().numpy() if isinstance(u, torch.Tensor) else u, dtype=np.float64) for u in updates])


def _like(arr: np.ndarray, ref) -> torch.Tensor:
    dtype = ref.dtype if isinstance(ref, torch.Tensor) else torch.float64
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def weighted_aggregate(updates, weights) -> torch.Tensor:
    """``sum_i (w_i / sum w) * theta_i``."""
    w = np.asarray(weights, dtype=np.float64)
    if len(updates) != len(w) or len(w) == 0:
        raise ValueError("need one non-negative weight per update")
    if (w < 0).any():
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if total <= 0:
        raise ZeroDivisionError("all aggregation weights are zero")
    return _like((w / total) @ _stack(updates), updates[0])


def krum_scores(updates, f: int) -> np.ndarray:
    stack = _stack(updates)
    n = len(stack)
    if n < f + 3:
        raise ValueError(f"krum needs n >= f + 3 (n={n}, f={f})")
    sq = np.square(stack[:, None, :] - stack[None, :, :]).sum(-1)
    k = n - f - 2
    scores = np.empty(n)
    for i in range(n):
        others = np.delete(sq[i], i)
        scores[i] = np.sort(others)[:k].sum()
    return scores


def krum(updates, f: int) -> tuple[int, torch.Tensor]:
    """Pick the update with the smallest sum of squared distances to its
    ``n - f - 2`` nearest neighbours; ties go to the lowest index."""
    scores = krum_scores(updates, f)
    best = scores.min()
    idx = int(np.flatnonzero(scores <= best + _TIE_RTOL * max(abs(best), 1e-300))[0])
    return idx, updates[idx].clone()


def coord_median(updates) -> torch.Tensor:
    """Per-coordinate median (mean of the middle pair for even counts)."""
    return _like(np.median(_stack(updates), axis=0), updates[0])


def norm_clip(updates, global_params, tau: float) -> list[torch.Tensor]:
    """Rescale each delta ``theta_i - global`` to norm at most ``tau``."""
    if not tau > 0:
        raise ValueError("clipping threshold must be positive")
    out = []
    for u in updates:
        delta = u - global_params
        norm = float(delta.norm())
        scale = 1.0 if norm <= tau else tau / norm
        out.append(global_params + delta * scale)
    return out


def c_median(updates, global_params, tau: float) -> torch.Tensor:
    return coord_median(norm_clip(updates, global_params, tau))


def median_delta_norm(updates, global_params) -> float:
    """Self-tuning clipping threshold: median L2 norm of this round's deltas."""
    return float(np.median([float((u - global_params).norm()) for u in updates]))


def fltrust_combine(updates, global_params, root_delta) -> torch.Tensor:
    """FLTrust step given the server's root delta ``g0``.

    Trust ``TS_i = max(0, cos(delta_i, g0))``; deltas rescaled to ``||g0||``;
    output ``global + sum TS_i * delta_i~ / sum TS_i`` (``global + g0`` if no
    client is trusted).
    """
    g0_norm = float(root_delta.norm())
    if g0_norm == 0.0:
        return global_params.clone()
    total = 0.0
    acc = torch.zeros_like(global_params, dtype=torch.float64)
    for u in updates:
        delta = (u - global_params).double()
        dn = float(delta.norm())
        if dn == 0.0:
            continue
        ts = max(0.0, cosine(delta, root_delta))
        if ts == 0.0:
            continue
        acc += ts * delta * (g0_norm / dn)
        total += ts
    if total == 0.0:
        return global_params + root_delta
    return global_params + (acc / total).to(global_params.dtype)


def fltrust(updates, global_params, model, root_shard: Batch, lr: float, steps=None, batch_size=32, seed=0):
    """FLTrust with the root delta computed by local training on ``root_shard``."""
    if len(root_shard) == 0:
        raise ValueError("FLTrust needs a non-empty root shard")
    theta0 = models.local_train(model, global_params, root_shard, lr, steps, batch_size, seed)
    return fltrust_combine(updates, global_params, theta0 - global_params)


# --------------------------------------------------------------------- defenses
@dataclass
class RoundInfo:
    """What the server knows when aggregating one round."""

    t: int
    client_ids: list[int]
    lr: float
    quarantined: list[bool]
    # oracle knowledge; only the Krum baseline reads it
    n_malicious: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)


class Defense:
    name = "base"

    def aggregate(self, global_params, updates, info: RoundInfo) -> tuple[torch.Tensor, dict]:
        raise NotImplementedError


class FedAvg(Defense):
    name = "fedavg"

    def aggregate(self, global_params, updates, info):
        w = [0.0 if q else 1.0 for q in info.quarantined]
        if sum(w) == 0:
            return global_params.clone(), {"excluded": list(info.client_ids)}
        excluded = [k for k, q in zip(info.client_ids, info.quarantined) if q]
        return weighted_aggregate(updates, w), {"excluded": excluded}


class KrumDefense(Defense):
    name = "krum"

    def __init__(self, f: int | None = None):
        self.f = f

    def aggregate(self, global_params, updates, info):
        n = len(updates)
        f = info.n_malicious if self.f is None else self.f
        f = max(0, min(f, n - 3))
        if n < 3:
            return FedAvg().aggregate(global_params, updates, info)
        idx, upd = krum(updates, f)
        return upd, {"excluded": [k for i, k in enumerate(info.client_ids) if i != idx]}


class MedianDefense(Defense):
    name = "median"

    def aggregate(self, global_params, updates, info):
        return coord_median(updates), {"excluded": []}


class ClippingDefense(Defense):
    name = "clipping"

    def __init__(self, tau: float | None = None):
        self.tau = tau

    def _tau(self, global_params, updates):
        tau = self.tau if self.tau is not None else median_delta_norm(updates, global_params)
        return tau if tau > 0 else math.inf

    def aggregate(self, global_params, updates, info):
        tau = self._tau(global_params, updates)
        clipped = updates if math.isinf(tau) else norm_clip(updates, global_params, tau)
        return FedAvg().aggregate(global_params, clipped, info)[0], {"excluded": [], "tau": tau}


class CMedianDefense(ClippingDefense):
    name = "cmedian"

    def aggregate(self, global_params, updates, info):
        tau = self._tau(global_params, updates)
        if math.isinf(tau):
            return coord_median(updates), {"excluded": [], "tau": tau}
        return c_median(updates, global_params, tau), {"excluded": [], "tau": tau}


class FLTrustDefense(Defense):
    name = "fltrust"

    def __init__(self, model, root_shard: Batch, steps=None, batch_size=32):
        self.model = model
        self.root_shard = root_shard
        self.steps = steps
        self.batch_size = batch_size

    def aggregate(self, global_params, updates, info):
        out = fltrust(
            updates, global_params, self.model, self.root_shard, info.lr,
            self.steps, self.batch_size, seed=info.seed,
        )
        return out, {"excluded": []}
