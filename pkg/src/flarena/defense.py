"""Adaptive aggregation driven by distribution-stability cues and a TD3 policy.

Per round: invert every sampled update into a small dummy batch, turn the
reconstructions into cue rows, let the policy pick cue weights ``a`` and a
threshold fraction ``b``, score / normalise / threshold the clients, update
the exclusion counters ``h`` and aggregate with a ``lambda ** h`` penalty.
The reward is the drop in validation loss.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import cues as cue_mod
from . import inversion, models
from .aggregators import Defense, RoundInfo, weighted_aggregate
from .data import Batch
from .td3 import TD3Agent, TD3Config, squash_action


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def raw_scores(state, a) -> np.ndarray:
    """Client scores ``state @ a``."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (4,) or (a < 0).any() or abs(a.sum() - 1.0) > 1e-9:
        raise ValueError("cue weights must lie on the 4-simplex")
    return np.asarray(state, dtype=np.float64) @ a


def mask_cues(state, a, mask) -> tuple[np.ndarray, np.ndarray]:
    """Zero the masked cue columns and renormalise ``a`` over the kept ones."""
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != (4,) or not m.any():
        raise ValueError("mask must keep at least one of the four cues")
    a = np.asarray(a, dtype=np.float64) * m
    a = a / a.sum() if a.sum() > 0 else m / m.sum()
    return np.asarray(state, dtype=np.float64) * m, a


def normalize_scores(scores, kappa: float = 0.05) -> np.ndarray:
    """Shifted min-max map into ``(0, 1]`` followed by sum-to-one normalisation.

    ``kappa`` keeps the lowest-scoring client strictly positive; with no spread
    every client gets ``1/n``.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("no scores to normalise")
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.full(s.size, 1.0 / s.size)
    u = (s - lo + kappa) / (hi - lo + kappa)
    return u / u.sum()


def apply_threshold(w_tilde, b: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero every weight ``<= b * max(w_tilde)``. Returns ``(w, excluded_mask)``."""
    w_tilde = np.asarray(w_tilde, dtype=np.float64)
    delta = w_tilde.max() * b
    excluded = w_tilde <= delta
    return np.where(excluded, 0.0, w_tilde), excluded


def update_h(excluded, client_ids, h: dict[int, int]) -> dict[int, int]:
    """Excluded clients gain one strike, included ones lose one (floored at 0)."""
    if len(excluded) != len(client_ids):
        raise ValueError("exclusion mask and client ids differ in length")
    out = dict(h)
    for k, ex in zip(client_ids, excluded):
        out[k] = out.get(k, 0) + 1 if ex else max(out.get(k, 0) - 1, 0)
    return out


def effective_weights(w, h_sampled, lam: float) -> np.ndarray:
    """``w_k / lam ** h_k`` renormalised to sum one (all zeros if nothing survives)."""
    if lam < 1:
        raise ValueError("penalty base must be >= 1")
    e = np.asarray(w, dtype=np.float64) / np.power(float(lam), np.asarray(h_sampled, dtype=np.float64))
    total = e.sum()
    return e / total if total > 0 else np.zeros_like(e)


def penalized_aggregate(updates, w, h_sampled, lam: float, previous_global: torch.Tensor) -> torch.Tensor:
    """Aggregate with weights ``w_k / lam ** h_k``; keeps ``previous_global`` if none survive."""
    if lam < 1:
        raise ValueError("penalty base must be >= 1")
    e = np.asarray(w, dtype=np.float64) / np.power(float(lam), np.asarray(h_sampled, dtype=np.float64))
    if not e.sum() > 0:
        return previous_global.clone()
    return weighted_aggregate(updates, e).to(previous_global.dtype)


def compute_reward(prev_loss: float, new_loss: float) -> float:
    if not (math.isfinite(prev_loss) and math.isfinite(new_loss)):
        raise ValueError("reward needs finite losses")
    return prev_loss - new_loss


@dataclass
class InversionConfig:
    num_images: int = 16
    max_iters: int = 30
    lr: float = 0.05
    beta: float = 1e-4


class CuePipeline:
    """Inversion + cue extraction, usable actively (by the defence) or
    passively (to log cues under any other aggregation rule)."""

    def __init__(self, model: models.Model, extractor, inv: InversionConfig | None = None):
        self.model = model
        self.extractor = extractor
        self.inv = inv or InversionConfig()
        self.history = cue_mod.HistoryStore()

    def observe(self, global_params, updates, info: RoundInfo) -> tuple[cue_mod.CueResult, dict]:
        t0 = time.perf_counter()
        recon: dict[int, torch.Tensor | None] = {}
        sims: dict[int, float] = {}
        for k, upd, quarantined in zip(info.client_ids, updates, info.quarantined):
            if quarantined:
                recon[k] = None
                continue
            try:
                g = inversion.batch_gradient_from_update(upd, global_params, info.lr)
                r = inversion.invert_gradients(
                    self.model, g, upd, self.inv.num_images, self.inv.max_iters,
                    self.inv.lr, self.inv.beta, seed=derive_seed(info.seed, info.t, k),
                )
            except (ValueError, FloatingPointError):
                recon[k] = None
                continue
            recon[k], sims[k] = r.images, r.similarity
        t1 = time.perf_counter()
        result = cue_mod.build_cues(recon, sims, self.history, self.extractor)
        t2 = time.perf_counter()
        return result, {"invert": (t1 - t0) * 1e3, "cues": (t2 - t1) * 1e3}


@dataclass
class AdaAggConfig:
    lam: float = 2.0
    kappa: float = 0.05
    cue_mask: tuple[bool, bool, bool, bool] = (True, True, True, True)  # False drops a cue
    train_policy: bool = True
    td3: TD3Config = field(default_factory=TD3Config)


class AdaAggDefense(Defense):
    """The adaptive rule. ``validation`` is the server split used for the reward."""

    name = "adaagg"

    def __init__(
        self,
        model: models.Model,
        extractor,
        validation: Batch,
        n_sampled: int,
        cfg: AdaAggConfig | None = None,
        inv: InversionConfig | None = None,
        seed: int = 0,
    ):
        self.model = model
        self.cfg = cfg or AdaAggConfig()
        if self.cfg.lam < 1:
            raise ValueError("penalty base must be >= 1")
        self.pipeline = CuePipeline(model, extractor, inv)
        self.validation = validation
        self.agent = TD3Agent(4 * n_sampled, 5, self.cfg.td3, seed=seed)
        self.agent.frozen = not self.cfg.train_policy
        self._pending = None  # (state, raw action, reward) awaiting next state
        self._prev_loss: float | None = None

    @property
    def history(self) -> cue_mod.HistoryStore:
        return self.pipeline.history

    def _policy_state(self, state: np.ndarray) -> np.ndarray:
        mask = np.asarray(self.cfg.cue_mask, dtype=np.float64)
        return (state * mask).astype(np.float32).reshape(-1)

    def aggregate(self, global_params, updates, info: RoundInfo):
        if self._prev_loss is None:
            self._prev_loss = models.evaluate(self.model, global_params, self.validation)[0]
        cue_res, timing = self.pipeline.observe(global_params, updates, info)

        t0 = time.perf_counter()
        state = self._policy_state(cue_res.state)
        if self._pending is not None:
            s, a, r = self._pending
            self.agent.replay.push(s, a, r, state, False)
        raw = self.agent.select_action(state, explore=not self.agent.frozen)
        a, b = squash_action(raw)
        masked_state, a = mask_cues(cue_res.state, a, self.cfg.cue_mask)
        t1 = time.perf_counter()

        w_tilde = normalize_scores(raw_scores(masked_state, a), self.cfg.kappa)
        w, excluded = apply_threshold(w_tilde, b)
        pos = {k: i for i, k in enumerate(info.client_ids)}
        quarantined = np.array([info.quarantined[pos[k]] for k in cue_res.order])
        w = np.where(quarantined, 0.0, w)
        excluded = excluded | quarantined
        if not (w > 0).any():
            excluded[:] = True
        self.history.h = update_h(excluded, cue_res.order, self.history.h)
        h_rows = [self.history.h[k] for k in cue_res.order]
        ordered_updates = [updates[pos[k]] for k in cue_res.order]
        new_global = penalized_aggregate(ordered_updates, w, h_rows, self.cfg.lam, global_params)
        t2 = time.perf_counter()

        new_loss = models.evaluate(self.model, new_global, self.validation)[0]
        reward = compute_reward(self._prev_loss, new_loss) if math.isfinite(new_loss) else -1.0
        self._prev_loss = new_loss if math.isfinite(new_loss) else self._prev_loss
        self._pending = (state, raw.astype(np.float32), reward)
        losses = self.agent.train_step()
        t3 = time.perf_counter()

        timing["policy"] = (t1 - t0 + t3 - t2) * 1e3
        timing["agg"] = (t2 - t1) * 1e3
        per_client = {
            k: {
                "cues": cue_res.cues[k],
                "w_tilde": float(w_tilde[i]),
                "excluded": bool(excluded[i]),
                "h": self.history.h[k],
            }
            for i, k in enumerate(cue_res.order)
        }
        return new_global, {
            "excluded": sorted(k for i, k in enumerate(cue_res.order) if excluded[i]),
            "reward": reward,
            "timing": timing,
            "clients": per_client,
            "action": (a.tolist(), b),
            "td3": losses,
        }

    def finish(self) -> None:
        """Close the episode: the last transition is terminal."""
        if self._pending is not None:
            s, a, r = self._pending
            self.agent.replay.push(s, a, r, s, True)
            self._pending = None
