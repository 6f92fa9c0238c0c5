"""Gradient inversion: recover a dummy batch whose parameter gradient points the
same way as a client's implied gradient.

The reconstruction is not meant to look like the client's data; it is a cheap
sample from something close to the client's data distribution, plus a
confidence score (the final cosine).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .data import Batch
from .models import Model, ig_objective

DEFAULTS = dict(num_images=16, max_iters=30, lr=0.05, beta=1e-4)


@dataclass
class Reconstruction:
    images: torch.Tensor
    labels: torch.Tensor
    similarity: float  # cosine between the reconstruction's gradient and the target
    objective: float
    iters_run: int


def cosine(u: torch.Tensor, v: torch.Tensor) -> float:
    """Cosine similarity of two flat vectors; zero vectors are rejected."""
    nu, nv = float(u.norm()), float(v.norm())
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine of a zero vector is undefined")
    c = float(torch.dot(u.double(), v.double())) / (nu * nv)
    return min(1.0, max(-1.0, c))


def batch_gradient_from_update(client_params: torch.Tensor, global_params: torch.Tensor, lr: float) -> torch.Tensor:
    """Gradient implied by one SGD step: ``(global - client) / lr``.

    Sign follows the descent convention, so ``client = global - lr * g`` gives
    back exactly ``g``.
    """
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    return (global_params - client_params) / lr


def invert_gradients(
    model: Model,
    target_grad: torch.Tensor,
    params: torch.Tensor,
    num_images: int = 16,
    max_iters: int = 30,
    lr: float = 0.05,
    beta: float = 1e-4,
    seed: int = 0,
) -> Reconstruction:
    """Adam on zero-initialised dummy pixels against the inversion objective.

    Dummy labels are drawn uniformly with ``seed`` and held fixed. The best
    iterate seen (lowest objective) is returned. A non-finite objective stops
    the loop early.
    """
    if num_images < 1:
        raise ValueError("need at least one dummy image")
    if float(target_grad.norm()) == 0.0:
        raise ValueError("target gradient is zero; nothing to invert")
    rng = np.random.default_rng(seed)
    labels = torch.from_numpy(rng.integers(0, model.spec.num_classes, size=num_images).astype(np.int64))
    x = torch.zeros((num_images, *model.spec.input_shape), dtype=params.dtype, requires_grad=True)
    opt = torch.optim.Adam([x], lr=lr, betas=(0.9, 0.999), eps=1e-8)
    target = target_grad.detach().to(params.dtype)
    params = params.detach()

    best_obj, best_x, iters = math.inf, x.detach().clone(), 0
    for it in range(max_iters):
        obj, gx = ig_objective(model, Batch(x.detach(), labels, model.spec.num_classes), target, params, beta)
        if not math.isfinite(obj) or not bool(torch.isfinite(gx).all()):
            break
        if obj < best_obj:
            best_obj, best_x = obj, x.detach().clone()
        opt.zero_grad(set_to_none=False)
        x.grad = gx
        opt.step()
        iters = it + 1
    final = Batch(x.detach(), labels, model.spec.num_classes)
    obj, _ = ig_objective(model, final, target, params, beta, with_grad=False)
    if math.isfinite(obj) and obj < best_obj:
        best_obj, best_x = obj, x.detach().clone()
    g = model.param_grad(params, best_x, labels)
    return Reconstruction(best_x, labels, cosine(g.detach(), target), best_obj, iters)
