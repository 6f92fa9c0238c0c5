import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flarena import data, models
from flarena.inversion import batch_gradient_from_update, cosine, invert_gradients
from flarena.models import ig_objective

from conftest import tiny_batch, tiny_model


def t64(x):
    return torch.tensor(x, dtype=torch.float64)


def test_batch_gradient_examples():
    torch.testing.assert_close(batch_gradient_from_update(t64([0.9, 1.1]), t64([1.0, 1.0]), 0.1), t64([1.0, -1.0]))
    assert torch.equal(batch_gradient_from_update(t64([2.0, 3.0]), t64([2.0, 3.0]), 0.5), t64([0.0, 0.0]))
    with pytest.raises(ValueError):
        batch_gradient_from_update(t64([1.0]), t64([1.0]), 0.0)


@given(arrays(np.float64, 5, elements=st.floats(-3, 3)), arrays(np.float64, 5, elements=st.floats(-3, 3)))
def test_single_step_gradient_recovered(theta, g):
    th, gg = torch.from_numpy(theta), torch.from_numpy(g)
    torch.testing.assert_close(batch_gradient_from_update(th - 0.25 * gg, th, 0.25), gg, rtol=1e-9, atol=1e-9)


def test_multi_step_gradient_aligns_with_full_gradient():
    m = tiny_model(num_classes=3)
    shard = tiny_batch(n=40, seed=5)
    theta = m.init_params(0) + 0.05
    up = models.local_train(m, theta, shard, lr=0.05, steps=3, batch_size=40)
    _, full = models.loss_and_grad(m, theta, shard)
    assert cosine(batch_gradient_from_update(up, theta, 0.05), full) > 0.9


# --------------------------------------------------------------------- cosine
def test_cosine_examples():
    u = t64([1.0, 2.0, -1.0])
    assert cosine(u, u) == pytest.approx(1.0)
    assert cosine(u, -u) == pytest.approx(-1.0)
    assert cosine(t64([1.0, 0.0]), t64([1.0, 1.0])) == pytest.approx(math.sqrt(2) / 2)
    with pytest.raises(ValueError):
        cosine(t64([0.0, 0.0]), u[:2])


@given(
    arrays(np.float64, 4, elements=st.floats(-10, 10)).filter(lambda a: np.linalg.norm(a) > 1e-3),
    arrays(np.float64, 4, elements=st.floats(-10, 10)).filter(lambda a: np.linalg.norm(a) > 1e-3),
    st.floats(1e-3, 1e3),
)
def test_cosine_scale_invariance(u, v, c):
    u, v = torch.from_numpy(u), torch.from_numpy(v)
    assert cosine(c * u, v) == pytest.approx(cosine(u, v), abs=1e-9)


# ----------------------------------------------------------------- inversion
def known_target(seed=0, n=4):
    m = tiny_model(num_classes=3)
    params = m.init_params(0) + torch.from_numpy(np.random.default_rng(seed).normal(0, 0.3, m.n_params))
    batch = tiny_batch(n=n, seed=seed + 10)
    return m, params, models.loss_and_grad(m, params, batch)[1]


def test_zero_iterations_returns_zero_images():
    m, params, g = known_target()
    r = invert_gradients(m, g, params, num_images=4, max_iters=0, seed=3)
    assert torch.equal(r.images, torch.zeros(4, 1, 4, 4, dtype=torch.float64))
    g0 = m.param_grad(params, r.images, r.labels)
    assert r.similarity == pytest.approx(cosine(g0, g))


def test_long_inversion_matches_gradient():
    m, params, g = known_target(seed=1, n=4)
    r = invert_gradients(m, g, params, num_images=4, max_iters=300, lr=0.05, beta=0.0, seed=0)
    assert r.similarity >= 0.99


def test_similarity_non_decreasing_in_iterations():
    sims = {it: [] for it in (10, 30, 50)}
    for seed in range(5):
        m, params, g = known_target(seed=seed)
        for it in sims:
            sims[it].append(invert_gradients(m, g, params, num_images=4, max_iters=it, seed=seed).similarity)
    med = [np.median(sims[it]) for it in (10, 30, 50)]
    assert med[0] <= med[1] <= med[2]


def test_inversion_deterministic_and_no_worse_than_init():
    m, params, g = known_target(seed=2)
    a = invert_gradients(m, g, params, num_images=4, max_iters=15, seed=9)
    b = invert_gradients(m, g, params, num_images=4, max_iters=15, seed=9)
    assert torch.equal(a.images, b.images) and a.similarity == b.similarity
    init = data.Batch(torch.zeros_like(a.images), a.labels, 3)
    start, _ = ig_objective(m, init, g, params, 1e-4, with_grad=False)
    end, _ = ig_objective(m, data.Batch(a.images, a.labels, 3), g, params, 1e-4, with_grad=False)
    assert end <= start


def test_inversion_rejects_zero_target():
    m = tiny_model()
    with pytest.raises(ValueError):
        invert_gradients(m, torch.zeros(m.n_params, dtype=torch.float64), m.init_params(0))
