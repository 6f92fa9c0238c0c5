"""Twin Delayed DDPG for the aggregation policy (and the adaptive adversary).

Raw (unsquashed) actions are what the actor emits, what the critics see and
what the replay buffer stores; :func:`squash_action` maps them into the
defence's action space only at the environment boundary.
"""
from __future__ import annotations

import copy
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_MAGIC = b"TD3P"
CHECKPOINT_VERSION = 1


@dataclass
class TD3Config:
    hidden: tuple[int, ...] = (256, 256)
    lr: float = 1e-5
    batch_size: int = 64
    gamma: float = 0.99
    tau: float = 0.005
    policy_delay: int = 2
    target_noise: float = 0.2
    noise_clip: float = 0.5
    explore_noise: float = 0.1
    warmup: int = 20
    capacity: int = 100_000
    raw_bound: float = 3.0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("discount must lie in (0, 1)")
        if not 0 < self.tau <= 1:
            raise ValueError("soft-update rate must lie in (0, 1]")
        self.hidden = tuple(int(h) for h in self.hidden)


def squash_action(raw) -> tuple[np.ndarray, float]:
    """Softmax over the first four raw components, sigmoid on the fifth."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (5,):
        raise ValueError(f"raw action must have 5 components, got shape {raw.shape}")
    if not np.isfinite(raw).all():
        raise ValueError("raw action is not finite")
    z = raw[:4] - raw[:4].max()
    a = np.exp(z)
    a /= a.sum()
    b = 0.5 * (1.0 + np.tanh(0.5 * raw[4]))  # overflow-free sigmoid
    return a, float(b)


def td3_target(reward, done, q1_next, q2_next, gamma):
    """Clipped double-Q target ``r + gamma * (1 - done) * min(Q1', Q2')``."""
    return reward + gamma * (1.0 - done) * torch.minimum(q1_next, q2_next)


@torch.no_grad()
def soft_update(target: nn.Module, source: nn.Module, tau: float) -> None:
    for tp, sp in zip(target.parameters(), source.parameters()):
        tp.mul_(1.0 - tau).add_(sp, alpha=tau)


def _mlp(sizes, out_act=None) -> nn.Sequential:
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(sizes) - 2:
            layers.append(nn.ReLU())
    if out_act is not None:
        layers.append(out_act)
    return nn.Sequential(*layers)


class Actor(nn.Module):
    def __init__(self, state_dim, action_dim, hidden, bound):
        super().__init__()
        self.net = _mlp([state_dim, *hidden, action_dim], nn.Tanh())
        self.bound = bound

    def forward(self, s):
        return self.bound * self.net(s)


class Critic(nn.Module):
    def __init__(self, state_dim, action_dim, hidden):
        super().__init__()
        self.net = _mlp([state_dim + action_dim, *hidden, 1])

    def forward(self, s, a):
        return self.net(torch.cat([s, a], dim=-1)).squeeze(-1)


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions with seeded uniform sampling."""

    def __init__(self, state_dim: int, action_dim: int, capacity: int, seed: int = 0):
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim), np.float32)
        self.a = np.zeros((capacity, action_dim), np.float32)
        self.r = np.zeros(capacity, np.float32)
        self.s2 = np.zeros((capacity, state_dim), np.float32)
        self.d = np.zeros(capacity, np.float32)
        self.ptr = 0
        self.size = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return self.size

    def push(self, s, a, r, s2, done) -> None:
        i = self.ptr
        self.s[i], self.a[i], self.r[i], self.s2[i], self.d[i] = s, a, r, s2, float(done)
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int):
        idx = self.rng.integers(0, self.size, size=n)
        t = torch.from_numpy
        return t(self.s[idx]), t(self.a[idx]), t(self.r[idx]), t(self.s2[idx]), t(self.d[idx])


class TD3Agent:
    """Actor, twin critics, their targets and the replay buffer of one learner."""

    def __init__(self, state_dim: int, action_dim: int = 5, cfg: TD3Config | None = None, seed: int = 0):
        self.cfg = cfg or TD3Config()
        self.state_dim, self.action_dim = state_dim, action_dim
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.actor = Actor(state_dim, action_dim, self.cfg.hidden, self.cfg.raw_bound)
            self.critic1 = Critic(state_dim, action_dim, self.cfg.hidden)
            self.critic2 = Critic(state_dim, action_dim, self.cfg.hidden)
        self.actor_target = copy.deepcopy(self.actor)
        self.critic1_target = copy.deepcopy(self.critic1)
        self.critic2_target = copy.deepcopy(self.critic2)
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=self.cfg.lr)
        self.critic_opt = torch.optim.Adam(
            list(self.critic1.parameters()) + list(self.critic2.parameters()), lr=self.cfg.lr
        )
        self.replay = ReplayBuffer(state_dim, action_dim, self.cfg.capacity, seed)
        self.rng = np.random.default_rng(seed + 1)
        self.gen = torch.Generator().manual_seed(seed + 2)
        self.steps = 0  # environment steps taken
        self.updates = 0  # gradient updates taken
        self.frozen = False

    # --------------------------------------------------------------- acting
    def select_action(self, state, explore: bool = True) -> np.ndarray:
        """Raw action for ``state``; uniform in [-1, 1] during warm-up."""
        state = np.asarray(state, dtype=np.float32).reshape(-1)
        if state.shape[0] != self.state_dim:
            raise ValueError(f"state has {state.shape[0]} entries, actor expects {self.state_dim}")
        if explore and self.steps < self.cfg.warmup:
            raw = self.rng.uniform(-1.0, 1.0, self.action_dim)
        else:
            with torch.no_grad():
                raw = self.actor(torch.from_numpy(state)).double().numpy()
            if explore:
                raw = raw + self.rng.normal(0.0, self.cfg.explore_noise, self.action_dim)
        if explore:
            self.steps += 1
        return raw

    # ------------------------------------------------------------- learning
    def train_step(self) -> dict | None:
        """One TD3 update. Returns ``None`` (no-op) while the buffer is underfull."""
        cfg = self.cfg
        if self.frozen or len(self.replay) < cfg.batch_size:
            return None
        s, a, r, s2, d = self.replay.sample(cfg.batch_size)
        with torch.no_grad():
            noise = torch.randn(a.shape, generator=self.gen) * cfg.target_noise
            noise = noise.clamp(-cfg.noise_clip, cfg.noise_clip)
            a2 = (self.actor_target(s2) + noise).clamp(-cfg.raw_bound, cfg.raw_bound)
            y = td3_target(r, d, self.critic1_target(s2, a2), self.critic2_target(s2, a2), cfg.gamma)
        q1, q2 = self.critic1(s, a), self.critic2(s, a)
        l1, l2 = F.mse_loss(q1, y), F.mse_loss(q2, y)
        self.critic_opt.zero_grad()
        (l1 + l2).backward()
        self.critic_opt.step()
        self.updates += 1
        out = {"critic1_loss": float(l1.detach()), "critic2_loss": float(l2.detach()), "actor_loss": None}
        if self.updates % cfg.policy_delay == 0:
            actor_loss = -self.critic1(s, self.actor(s)).mean()
            self.actor_opt.zero_grad()
            actor_loss.backward()
            self.actor_opt.step()
            out["actor_loss"] = float(actor_loss.detach())
            soft_update(self.actor_target, self.actor, cfg.tau)
            soft_update(self.critic1_target, self.critic1, cfg.tau)
            soft_update(self.critic2_target, self.critic2, cfg.tau)
        return out

    # ---------------------------------------------------------- checkpoints
    def _modules(self):
        return [self.actor, self.critic1, self.critic2, self.actor_target, self.critic1_target, self.critic2_target]

    def save(self, path) -> None:
        """Flat little-endian checkpoint.

        Header: magic ``TD3P``, uint32 version, uint32 tensor count, then per
        tensor a uint32 rank followed by its uint32 dims. Body: every tensor's
        values as float32, in header order (actor, critic1, critic2 and the
        three targets, each in ``state_dict`` order).
        """
        tensors = [t.detach() for m in self._modules() for t in m.state_dict().values()]
        header = bytearray(CHECKPOINT_MAGIC)
        header += struct.pack("<II", CHECKPOINT_VERSION, len(tensors))
        for t in tensors:
            header += struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape)
        body = np.concatenate([t.float().numpy().ravel() for t in tensors]).astype("<f4")
        Path(path).write_bytes(bytes(header) + body.tobytes())

    def load(self, path) -> None:
        raw = Path(path).read_bytes()
        if raw[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a policy checkpoint")
        version, count = struct.unpack_from("<II", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        off, shapes = 12, []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", raw, off)
            shapes.append(struct.unpack_from(f"<{ndim}I", raw, off + 4))
            off += 4 + 4 * ndim
        body = np.frombuffer(raw, dtype="<f4", offset=off)
        pos = 0
        items = [(m, k, v) for m in self._modules() for k, v in m.state_dict().items()]
        if len(items) != count:
            raise ValueError(f"{path}: checkpoint holds {count} tensors, agent has {len(items)}")
        for (m, k, v), shape in zip(items, shapes):
            if tuple(v.shape) != tuple(shape):
                raise ValueError(f"{path}: shape mismatch for {k}: {shape} vs {tuple(v.shape)}")
            n = int(np.prod(shape)) if shape else 1
            with torch.no_grad():
                v.copy_(torch.from_numpy(body[pos : pos + n].copy()).view(v.shape))
            pos += n
