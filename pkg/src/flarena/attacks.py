"""Untargeted model-poisoning attacks.

Attackers have full knowledge: they see the current global model and every
benign update of the round. All attacks except EB make the sampled attackers
send one identical (colluding) upload.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import models
from .aggregators import krum
from .data import Batch
from .inversion import batch_gradient_from_update
from .td3 import TD3Agent, TD3Config


@dataclass
class AttackContext:
    global_params: torch.Tensor
    benign_updates: list[torch.Tensor]
    malicious_ids: list[int]
    lr: float
    t: int
    n_sampled: int
    model: models.Model | None = None
    shards: dict[int, Batch] = field(default_factory=dict)
    local_steps: int | None = None
    batch_size: int = 32
    seed: int = 0
    rounds: int = 1
    prev_global: torch.Tensor | None = None

    def mean_benign_gradient(self) -> torch.Tensor:
        if not self.benign_updates:
            raise ValueError("attack needs at least one benign update")
        grads = [batch_gradient_from_update(u, self.global_params, self.lr) for u in self.benign_updates]
        return torch.stack(grads).mean(0)


def upload_for_gradient(global_params: torch.Tensor, grad: torch.Tensor, lr: float) -> torch.Tensor:
    """Parameters whose implied single-step gradient is ``grad``."""
    return global_params - lr * grad


def ipm(ctx: AttackContext, eps: float = 1.0) -> torch.Tensor:
    """Inner-product manipulation: send gradient ``-eps * mean benign gradient``."""
    m = ctx.mean_benign_gradient()
    return upload_for_gradient(ctx.global_params, -eps * m, ctx.lr)


def krum_accepts(candidate: torch.Tensor, benign: list[torch.Tensor], n_copies: int) -> bool:
    """Would Krum (told ``f = n_copies``) pick one of ``n_copies`` copies of ``candidate``?"""
    pool = list(benign) + [candidate] * n_copies
    n = len(pool)
    if n < 3:
        return True
    f = min(n_copies, n - 3)
    idx, _ = krum(pool, f)
    return idx >= len(benign)


def lmp_search(ctx: AttackContext, lam0: float = 10.0, halvings: int = 10):
    """Directed-deviation search. Returns ``(upload, lambda, rejections)``."""
    if not lam0 > 0:
        raise ValueError("initial deviation must be positive")
    s = torch.sign(ctx.mean_benign_gradient())
    n_copies = max(1, len(ctx.malicious_ids))
    lam, rejections = lam0, 0
    candidate = upload_for_gradient(ctx.global_params, -lam * s, ctx.lr)
    for attempt in range(halvings):
        lam = lam0 / 2**attempt
        candidate = upload_for_gradient(ctx.global_params, -lam * s, ctx.lr)
        if krum_accepts(candidate, ctx.benign_updates, n_copies):
            break
        rejections += 1
    return candidate, lam, rejections


def lmp(ctx: AttackContext, lam0: float = 10.0, halvings: int = 10) -> torch.Tensor:
    return lmp_search(ctx, lam0, halvings)[0]


def flip_labels(shard: Batch) -> Batch:
    return Batch(shard.x, (shard.y + 1) % shard.num_classes, shard.num_classes)


def eb(ctx: AttackContext, shard: Batch, seed: int = 0) -> torch.Tensor:
    """Train on label-flipped data, then boost the delta by ``|C| / #malicious``."""
    if not ctx.malicious_ids:
        raise ValueError("boosting needs at least one sampled attacker")
    poisoned = models.local_train(
        ctx.model, ctx.global_params, flip_labels(shard), ctx.lr, ctx.local_steps, ctx.batch_size, seed
    )
    boost = ctx.n_sampled / len(ctx.malicious_ids)
    return ctx.global_params + boost * (poisoned - ctx.global_params)


def _sigmoid(x: float) -> float:
    return float(0.5 * (1.0 + np.tanh(0.5 * x)))


def rl_attack_step(obs, agent: TD3Agent, explore: bool = True) -> tuple[float, float, np.ndarray]:
    """Adversary action ``(mix, scale)`` in ``[0, 1] x [0, 2]`` plus the raw action."""
    raw = agent.select_action(np.asarray(obs, dtype=np.float32), explore=explore)
    return _sigmoid(raw[0]), 2.0 * _sigmoid(raw[1]), raw


# ------------------------------------------------------------------ strategies
class Attack:
    name = "none"

    def craft(self, ctx: AttackContext) -> list[torch.Tensor]:
        raise NotImplementedError

    def after_round(self, accuracy: float) -> None:
        pass

    def finish(self) -> None:
        pass


class IPMAttack(Attack):
    name = "ipm"

    def __init__(self, eps: float = 1.0):
        self.eps = eps

    def craft(self, ctx):
        up = ipm(ctx, self.eps)
        return [up.clone() for _ in ctx.malicious_ids]


class LMPAttack(Attack):
    name = "lmp"

    def __init__(self, lam0: float = 10.0, halvings: int = 10):
        self.lam0, self.halvings = lam0, halvings

    def craft(self, ctx):
        up = lmp(ctx, self.lam0, self.halvings)
        return [up.clone() for _ in ctx.malicious_ids]


class EBAttack(Attack):
    name = "eb"

    def craft(self, ctx):
        return [eb(ctx, ctx.shards[k], seed=ctx.seed + k) for k in ctx.malicious_ids]


class RLAttack(Attack):
    """Online TD3 adversary choosing how much to flip vs. mimic, and how hard.

    Observation: (previous accuracy, previous accuracy change, t / rounds).
    Reward: accuracy drop caused by the round.
    """

    name = "rl"

    def __init__(self, cfg: TD3Config | None = None, seed: int = 0, train: bool = True):
        self.agent = TD3Agent(3, 2, cfg or TD3Config(), seed=seed)
        self.agent.frozen = not train
        self.prev_acc, self.prev_delta = 0.1, 0.0
        self._pending = None
        self.last_action = None

    def _obs(self, t, rounds):
        return np.array([self.prev_acc, self.prev_delta, t / max(rounds, 1)], dtype=np.float32)

    def craft(self, ctx):
        m = ctx.mean_benign_gradient()
        if ctx.prev_global is None:
            m_hat = m
        else:
            m_hat = batch_gradient_from_update(ctx.global_params, ctx.prev_global, ctx.lr)
        obs = self._obs(ctx.t, ctx.rounds)
        mix, scale, raw = rl_attack_step(obs, self.agent, explore=not self.agent.frozen)
        self.last_action = (mix, scale)
        self._pending = (obs, raw.astype(np.float32), ctx.t, ctx.rounds)
        grad = scale * (mix * (-m) + (1.0 - mix) * m_hat)
        up = upload_for_gradient(ctx.global_params, grad, ctx.lr)
        return [up.clone() for _ in ctx.malicious_ids]

    def after_round(self, accuracy: float) -> None:
        delta = accuracy - self.prev_acc
        if self._pending is not None:
            obs, raw, t, rounds = self._pending
            reward = self.prev_acc - accuracy
            nxt = np.array([accuracy, delta, (t + 1) / max(rounds, 1)], dtype=np.float32)
            self.agent.replay.push(obs, raw, reward, nxt, t + 1 >= rounds)
            self.agent.train_step()
            self._pending = None
        self.prev_acc, self.prev_delta = accuracy, delta

    def finish(self) -> None:
        self.prev_acc, self.prev_delta = 0.1, 0.0


class NoAttack(Attack):
    name = "none"

    def craft(self, ctx):
        return []
