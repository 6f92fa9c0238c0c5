"""Federated round loop: partitioning, client sampling and one round of
local training / attack / aggregation."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import models
from .aggregators import Defense, RoundInfo, weighted_aggregate  # noqa: F401  (re-export)
from .attacks import Attack, AttackContext, NoAttack
from .data import Batch
from .defense import CuePipeline, derive_seed


@dataclass
class ShardAssignment:
    shards: list[np.ndarray]  # sample indices per client
    n_malicious: int = 0
    group_of_client: np.ndarray | None = None

    @property
    def num_clients(self) -> int:
        return len(self.shards)

    def is_malicious(self, k: int) -> bool:
        return k < self.n_malicious


def partition_noniid(labels, num_clients: int, q: float, num_classes: int, seed: int = 0,
                     n_malicious: int = 0, max_attempts: int = 10) -> ShardAssignment:
    """Label-skewed split.

    Clients are shuffled and dealt round-robin into ``num_classes`` groups. A
    sample with label ``l`` goes to group ``l`` with probability ``q`` and to
    each other group with probability ``(1 - q) / (M - 1)``; inside its group
    it lands on a uniformly chosen client. Empty shards trigger a redraw.
    """
    labels = np.asarray(labels, dtype=np.int64)
    M, K = num_classes, num_clients
    if not (1.0 / M - 1e-12 <= q <= 1.0):
        raise ValueError(f"q must lie in [1/M, 1], got {q}")
    if K < M:
        raise ValueError(f"need at least as many clients ({K}) as classes ({M})")
    for attempt in range(max_attempts):
        rng = np.random.default_rng(derive_seed(seed, attempt))
        group_of_client = np.empty(K, dtype=np.int64)
        group_of_client[rng.permutation(K)] = np.arange(K) % M
        members = [np.flatnonzero(group_of_client == g) for g in range(M)]
        own = rng.random(labels.size) < q
        other = rng.integers(0, M - 1, size=labels.size)
        other = np.where(other >= labels, other + 1, other)
        group = np.where(own, labels, other)
        pick = rng.random(labels.size)
        client = np.empty(labels.size, dtype=np.int64)
        for g in range(M):
            sel = group == g
            client[sel] = members[g][(pick[sel] * len(members[g])).astype(np.int64)]
        shards = [np.flatnonzero(client == k) for k in range(K)]
        if all(len(s) for s in shards):
            return ShardAssignment(shards, n_malicious, group_of_client)
    raise RuntimeError(f"partition left an empty shard after {max_attempts} attempts")


@dataclass
class RoundPlan:
    t: int
    client_ids: list[int]
    seed: int


def sample_round(num_clients: int, fraction: float, t: int, seed: int) -> RoundPlan:
    """Uniform sample of ``ceil(fraction * K)`` distinct clients."""
    if not 0 < fraction <= 1:
        raise ValueError("sampling fraction must lie in (0, 1]")
    m = max(1, math.ceil(fraction * num_clients - 1e-9))
    rng = np.random.default_rng([int(seed), int(t)])
    ids = np.sort(rng.choice(num_clients, size=m, replace=False))
    return RoundPlan(t, [int(i) for i in ids], seed)


@dataclass
class RoundRecord:
    t: int
    test_acc: float
    test_loss: float
    reward: float | None
    excluded: list[int]
    times_ms: dict[str, float]
    round_ms: float
    clients: list[dict] = field(default_factory=list)

    STAGES = ("local", "invert", "cues", "policy", "agg")


@dataclass
class Federation:
    """Everything fixed for the lifetime of a run."""

    model: models.Model
    train: Batch
    assignment: ShardAssignment
    test: Batch
    lr: float = 0.05
    local_steps: int | None = None
    batch_size: int = 32
    rounds: int = 1
    _shards: dict[int, Batch] = field(default_factory=dict, repr=False)

    def shard(self, k: int) -> Batch:
        if k not in self._shards:
            self._shards[k] = self.train.subset(self.assignment.shards[k])
        return self._shards[k]


def _local_update(fed: Federation, params, k: int, seed: int):
    try:
        return models.local_train(fed.model, params, fed.shard(k), fed.lr, fed.local_steps, fed.batch_size, seed)
    except FloatingPointError:
        return None


def run_round(
    fed: Federation,
    global_params: torch.Tensor,
    plan: RoundPlan,
    attack: Attack | None,
    defense: Defense,
    passive_cues: CuePipeline | None = None,
    prev_global: torch.Tensor | None = None,
) -> tuple[torch.Tensor, RoundRecord]:
    """One communication round. ``global_params`` is never modified in place."""
    attack = attack or NoAttack()
    start = time.perf_counter()
    ids = plan.client_ids
    malicious = [k for k in ids if fed.assignment.is_malicious(k)]
    benign = [k for k in ids if not fed.assignment.is_malicious(k)]

    uploads: dict[int, torch.Tensor | None] = {}
    for k in benign:
        uploads[k] = _local_update(fed, global_params, k, derive_seed(plan.seed, plan.t, k))
    if malicious:
        if isinstance(attack, NoAttack):
            for k in malicious:
                uploads[k] = _local_update(fed, global_params, k, derive_seed(plan.seed, plan.t, k))
        else:
            reference = [uploads[k] for k in benign if uploads[k] is not None]
            if not reference:
                # no honest client sampled: attackers use honest updates on their own data
                reference = [
                    u for k in malicious
                    if (u := _local_update(fed, global_params, k, derive_seed(plan.seed, plan.t, k))) is not None
                ]
            ctx = AttackContext(
                global_params=global_params, benign_updates=reference, malicious_ids=malicious,
                lr=fed.lr, t=plan.t, n_sampled=len(ids), model=fed.model,
                shards={k: fed.shard(k) for k in malicious}, local_steps=fed.local_steps,
                batch_size=fed.batch_size, seed=derive_seed(plan.seed, plan.t, 7919),
                rounds=fed.rounds, prev_global=prev_global,
            )
            for k, u in zip(malicious, attack.craft(ctx)):
                uploads[k] = u

    updates, quarantined = [], []
    for k in ids:
        u = uploads.get(k)
        bad = u is None or not bool(torch.isfinite(u).all())
        updates.append(global_params.clone() if bad else u)
        quarantined.append(bad)
    t_local = (time.perf_counter() - start) * 1e3

    info = RoundInfo(
        t=plan.t, client_ids=list(ids), lr=fed.lr, quarantined=quarantined,
        n_malicious=len(malicious), seed=derive_seed(plan.seed, plan.t),
    )
    times = {s: 0.0 for s in RoundRecord.STAGES}
    times["local"] = t_local
    passive = None
    if passive_cues is not None:
        passive, ptimes = passive_cues.observe(global_params, updates, info)
        times.update(ptimes)
    t0 = time.perf_counter()
    new_global, details = defense.aggregate(global_params, updates, info)
    t_defense = (time.perf_counter() - t0) * 1e3
    if "timing" in details:
        for key, v in details["timing"].items():
            times[key] += v
    else:
        times["agg"] += t_defense
    round_ms = (time.perf_counter() - start) * 1e3

    test_loss, test_acc = models.evaluate(fed.model, new_global, fed.test)
    attack.after_round(test_acc)

    clients = []
    per_client = details.get("clients", {})
    for k, q in zip(ids, quarantined):
        row = {"client_id": k, "is_malicious": fed.assignment.is_malicious(k), "quarantined": q}
        if k in per_client:
            c = per_client[k]
            row.update(cues=c["cues"], w_tilde=c["w_tilde"], excluded=c["excluded"], h=c["h"])
        elif passive is not None:
            row.update(cues=passive.cues[k], excluded=k in details.get("excluded", []))
        clients.append(row)
    record = RoundRecord(
        t=plan.t, test_acc=test_acc, test_loss=test_loss, reward=details.get("reward"),
        excluded=sorted(details.get("excluded", [])), times_ms=times, round_ms=round_ms, clients=clients,
    )
    return new_global, record
