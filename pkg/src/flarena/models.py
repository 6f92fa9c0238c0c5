"""Small differentiable classifiers operating on flat parameter vectors.

Models never own their weights. A :class:`Model` knows the architecture and how
to slice a flat parameter vector (the ``ParamVector`` that every aggregation rule
works on) into named blocks; all functions here take that vector explicitly.
Second derivatives (gradient of a function of the parameter gradient with
respect to the inputs) come from torch autograd with ``create_graph=True``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import Batch

ARCHS = ("logreg", "small-cnn")


class NonFiniteError(FloatingPointError):
    """Raised when a loss, gradient or parameter vector stops being finite."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``small-cnn`` is conv(16, 3x3)-relu-maxpool2, conv(32, 3x3)-relu-maxpool2,
    dense(feature_width)-relu, dense(num_classes). ``logreg`` is a single dense
    layer on the flattened input.
    """

    arch: str
    input_shape: tuple[int, int, int]
    num_classes: int
    feature_width: int = 64

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")


def _conv_out(side: int) -> int:
    side = (side - 2) // 2
    return (side - 2) // 2


class Model:
    """Architecture + flat-vector bookkeeping for one :class:`ModelSpec`."""

    def __init__(self, spec: ModelSpec, dtype: torch.dtype = torch.float32):
        self.spec = spec
        self.dtype = dtype
        c, h, w = spec.input_shape
        m = spec.num_classes
        if spec.arch == "logreg":
            self.blocks = [("weight", (m, c * h * w)), ("bias", (m,))]
        else:
            oh, ow = _conv_out(h), _conv_out(w)
            if oh < 1 or ow < 1:
                raise ValueError(f"input {spec.input_shape} too small for small-cnn")
            fw = spec.feature_width
            self.blocks = [
                ("conv1.weight", (16, c, 3, 3)),
                ("conv1.bias", (16,)),
                ("conv2.weight", (32, 16, 3, 3)),
                ("conv2.bias", (32,)),
                ("fc1.weight", (fw, 32 * oh * ow)),
                ("fc1.bias", (fw,)),
                ("fc2.weight", (m, fw)),
                ("fc2.bias", (m,)),
            ]
        self.sizes = [math.prod(s) for _, s in self.blocks]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).tolist()
        self.n_params = int(self.offsets[-1])

    def __repr__(self):
        return f"Model({self.spec.arch}, P={self.n_params})"

    # ------------------------------------------------------------------ params
    def init_params(self, seed: int) -> torch.Tensor:
        """Uniform(+-1/sqrt(fan_in)) init under ``seed``; logreg starts at zero."""
        gen = torch.Generator().manual_seed(int(seed))
        parts = []
        for name, shape in self.blocks:
            if name.endswith("weight"):
                fan_in = math.prod(shape[1:])
            else:
                # bias shares its layer's fan-in
                fan_in = math.prod(dict(self.blocks)[name.replace("bias", "weight")][1:])
            bound = 1.0 / math.sqrt(fan_in)
            parts.append((torch.rand(math.prod(shape), generator=gen, dtype=torch.float64) * 2 - 1) * bound)
        if self.spec.arch == "logreg":
            parts = [p * 0 for p in parts]
        return torch.cat(parts).to(self.dtype)

    def unflatten(self, flat: torch.Tensor) -> dict[str, torch.Tensor]:
        if flat.ndim != 1 or flat.shape[0] != self.n_params:
            raise ValueError(f"expected a flat vector of length {self.n_params}, got {tuple(flat.shape)}")
        return {
            name: flat[a:b].view(shape)
            for (name, shape), a, b in zip(self.blocks, self.offsets[:-1], self.offsets[1:])
        }

    def block_of(self, index: int) -> str:
        """Name of the parameter block containing flat position ``index``."""
        pos = int(np.searchsorted(self.offsets, index, side="right")) - 1
        return self.blocks[pos][0]

    # ----------------------------------------------------------------- forward
    def features(self, params: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        """Penultimate activations (the ``feature_width`` layer for small-cnn)."""
        p = self.unflatten(params)
        x = x.to(params.dtype)
        if self.spec.arch == "logreg":
            return x.flatten(1)
        h = F.max_pool2d(F.relu(F.conv2d(x, p["conv1.weight"], p["conv1.bias"])), 2)
        h = F.max_pool2d(F.relu(F.conv2d(h, p["conv2.weight"], p["conv2.bias"])), 2)
        return F.relu(F.linear(h.flatten(1), p["fc1.weight"], p["fc1.bias"]))

    def logits(self, params: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        p = self.unflatten(params)
        h = self.features(params, x)
        if self.spec.arch == "logreg":
            return F.linear(h, p["weight"], p["bias"])
        return F.linear(h, p["fc2.weight"], p["fc2.bias"])

    def param_grad(self, params, x, y, create_graph=False) -> torch.Tensor:
        """Flat gradient of the mean cross-entropy w.r.t. the parameters."""
        with torch.enable_grad():
            if not params.requires_grad:
                params = params.detach().requires_grad_(True)
            loss = F.cross_entropy(self.logits(params, x), y)
            (g,) = torch.autograd.grad(loss, params, create_graph=create_graph)
        return g


def _check_finite(model: Model, vec: torch.Tensor, what: str) -> None:
    bad = ~torch.isfinite(vec)
    if bool(bad.any()):
        first = int(torch.nonzero(bad)[0])
        raise NonFiniteError(f"non-finite {what} in parameter block {model.block_of(first)!r} (index {first})")


def loss_and_grad(model: Model, params: torch.Tensor, batch: Batch) -> tuple[float, torch.Tensor]:
    """Mean cross-entropy over ``batch`` and its gradient w.r.t. ``params``."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    with torch.enable_grad():
        p = params.detach().requires_grad_(True)
        loss = F.cross_entropy(model.logits(p, batch.x), batch.y)
        (grad,) = torch.autograd.grad(loss, p)
    value = float(loss.detach())
    if not math.isfinite(value):
        _check_finite(model, params, "parameter")
        raise NonFiniteError("non-finite loss with finite parameters")
    _check_finite(model, grad, "gradient")
    return value, grad.detach()


def local_train(
    model: Model,
    params: torch.Tensor,
    shard: Batch,
    lr: float,
    steps: int | None = None,
    batch_size: int = 32,
    seed: int = 0,
) -> torch.Tensor:
    """Plain mini-batch SGD.

    ``steps=None`` runs one epoch (``ceil(n / batch_size)`` steps). Mini-batches
    walk a seeded permutation of the shard, reshuffling when it is exhausted.
    """
    if len(shard) == 0:
        raise ValueError("empty shard")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    n = len(shard)
    batch_size = min(batch_size, n)
    if steps is None:
        steps = math.ceil(n / batch_size)
    if steps < 1:
        raise ValueError("need at least one local step")
    rng = np.random.default_rng(seed)
    perm, pos = rng.permutation(n), 0
    theta = params.detach().clone()
    for _ in range(steps):
        if pos >= n:
            perm, pos = rng.permutation(n), 0
        idx = torch.from_numpy(perm[pos : pos + batch_size])
        pos += batch_size
        _, g = loss_and_grad(model, theta, Batch(shard.x[idx], shard.y[idx], shard.num_classes))
        theta = theta - lr * g
    _check_finite(model, theta, "parameter after local training")
    return theta


@torch.no_grad()
def evaluate(model: Model, params: torch.Tensor, dataset: Batch, chunk: int = 2000) -> tuple[float, float]:
    """Return ``(mean cross-entropy, accuracy)`` over the whole dataset."""
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    total_loss, correct = 0.0, 0
    for start in range(0, n, chunk):
        x, y = dataset.x[start : start + chunk], dataset.y[start : start + chunk]
        out = model.logits(params, x)
        total_loss += float(F.cross_entropy(out, y, reduction="sum"))
        correct += int((out.argmax(1) == y).sum())
    return total_loss / n, correct / n


def total_variation(image) -> float | torch.Tensor:
    """Anisotropic total variation over the last two axes.

    Sums absolute forward differences down rows and across columns; extra
    leading axes (channels, batch) are summed too. Returns a float for array
    input and a (differentiable) scalar tensor for tensor input.
    """
    as_tensor = isinstance(image, torch.Tensor)
    x = image if as_tensor else torch.as_tensor(np.asarray(image, dtype=np.float64))
    if x.ndim < 2 or x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ValueError("total variation needs an image of at least 2x2")
    tv = (x[..., 1:, :] - x[..., :-1, :]).abs().sum() + (x[..., :, 1:] - x[..., :, :-1]).abs().sum()
    return tv if as_tensor else float(tv)


def _cosine_t(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    return torch.dot(u, v) / (u.norm() * v.norm())


def ig_objective(
    model: Model,
    dummy: Batch,
    target_grad: torch.Tensor,
    params: torch.Tensor,
    beta: float,
    with_grad: bool = True,
) -> tuple[float, torch.Tensor | None]:
    """Inversion objective ``1 - cos(grad_theta F_dummy, target) + beta/B * sum TV(x)``.

    Returns the objective value and, if requested, its gradient w.r.t. the dummy
    pixels (labels fixed).
    """
    if float(target_grad.norm()) == 0.0:
        raise ValueError("target gradient is zero; cosine undefined")
    with torch.enable_grad():
        x = dummy.x.detach().to(params.dtype).requires_grad_(with_grad)
        p = params.detach().requires_grad_(True)
        g = model.param_grad(p, x, dummy.y, create_graph=with_grad)
        if float(g.detach().norm()) == 0.0:
            raise ValueError("dummy-batch gradient is zero; cosine undefined")
        obj = 1.0 - _cosine_t(g, target_grad.to(params.dtype))
        if beta:
            obj = obj + beta / len(dummy) * total_variation(x)
        if not with_grad:
            return float(obj.detach()), None
        (gx,) = torch.autograd.grad(obj, x)
    return float(obj.detach()), gx.detach()


def ig_pixel_grad(model: Model, dummy: Batch, target_grad: torch.Tensor, params: torch.Tensor, beta: float) -> torch.Tensor:
    """Exact gradient of :func:`ig_objective` with respect to the dummy pixels."""
    return ig_objective(model, dummy, target_grad, params, beta)[1]

