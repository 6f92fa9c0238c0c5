import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from flarena import data, models
from flarena.models import ig_objective, ig_pixel_grad, loss_and_grad, total_variation

from conftest import tiny_batch, tiny_model


def central_diff(f, x: torch.Tensor, coords, h=1e-6):
    out = []
    for i in coords:
        e = torch.zeros_like(x).reshape(-1)
        e[i] = h
        e = e.reshape(x.shape)
        out.append((f(x + e) - f(x - e)) / (2 * h))
    return np.array(out)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


# ----------------------------------------------------------------- loss_and_grad
def test_zero_logreg_loss_is_log2():
    m = tiny_model(num_classes=2)
    b = data.Batch(torch.rand(4, 1, 4, 4, dtype=torch.float64), torch.tensor([0, 1, 0, 1]), 2)
    loss, grad = loss_and_grad(m, m.init_params(0), b)
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    assert grad.shape == (m.n_params,)


@pytest.mark.parametrize("seed", range(10))
def test_loss_grad_matches_finite_differences_logreg(seed):
    m = tiny_model()
    b = tiny_batch(seed=seed)
    p = torch.from_numpy(np.random.default_rng(seed).normal(size=m.n_params))
    _, g = loss_and_grad(m, p, b)
    fd = central_diff(lambda q: loss_and_grad(m, q, b)[0], p, range(m.n_params))
    assert rel_err(g.numpy(), fd) < 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_loss_grad_matches_finite_differences_cnn(seed):
    m = tiny_model("small-cnn", side=10)
    b = tiny_batch(n=4, side=10, seed=seed)
    p = m.init_params(seed)
    _, g = loss_and_grad(m, p, b)
    coords = np.random.default_rng(seed).choice(m.n_params, 60, replace=False)
    fd = central_diff(lambda q: loss_and_grad(m, q, b)[0], p, coords)
    assert rel_err(g.numpy()[coords], fd) < 1e-5


def test_duplicated_batch_same_loss_and_grad(logreg):
    b = tiny_batch()
    p = logreg.init_params(1) + 0.3
    dup = data.Batch(torch.cat([b.x, b.x]), torch.cat([b.y, b.y]), b.num_classes)
    l1, g1 = loss_and_grad(logreg, p, b)
    l2, g2 = loss_and_grad(logreg, p, dup)
    assert l1 == pytest.approx(l2, abs=1e-14)
    torch.testing.assert_close(g1, g2, rtol=0, atol=1e-14)


def test_non_finite_names_block():
    m = tiny_model("small-cnn", side=10)
    p = m.init_params(0)
    names = [name for name, _ in m.blocks]
    p[m.offsets[names.index("fc1.weight")] + 3] = float("nan")
    with pytest.raises(models.NonFiniteError, match="fc1.weight"):
        loss_and_grad(m, p, tiny_batch(side=10))


# ------------------------------------------------------------------ local_train
def test_zero_lr_returns_input_exactly(logreg):
    p = logreg.init_params(0) + 0.1
    out = models.local_train(logreg, p, tiny_batch(), lr=0.0, steps=5, batch_size=2)
    assert torch.equal(out, p)


def test_single_full_batch_step_is_gradient_step(logreg):
    b = tiny_batch()
    p = logreg.init_params(0) + 0.2
    out = models.local_train(logreg, p, b, lr=0.3, steps=1, batch_size=len(b))
    _, g = loss_and_grad(logreg, p, b)
    torch.testing.assert_close(out, p - 0.3 * g, rtol=0, atol=1e-15)


def test_logreg_descends_on_separable_data():
    m = tiny_model(num_classes=2)
    x = torch.zeros(20, 1, 4, 4, dtype=torch.float64)
    y = torch.arange(20) % 2
    x[y == 1, 0, :2] = 1.0
    shard = data.Batch(x, y, 2)
    p0 = m.init_params(0)
    p = models.local_train(m, p0, shard, lr=0.1, steps=50, batch_size=5, seed=3)
    assert loss_and_grad(m, p, shard)[0] < loss_and_grad(m, p0, shard)[0]


def test_local_train_rejects_empty_shard(logreg):
    empty = data.Batch.__new__(data.Batch)
    empty.x, empty.y, empty.num_classes = torch.zeros(0, 1, 4, 4), torch.zeros(0, dtype=torch.long), 3
    with pytest.raises(ValueError):
        models.local_train(logreg, logreg.init_params(0), empty, lr=0.1)


def test_local_train_deterministic_and_length(logreg):
    b = tiny_batch(n=20)
    p = logreg.init_params(0)
    a1 = models.local_train(logreg, p, b, 0.1, 7, 3, seed=11)
    a2 = models.local_train(logreg, p, b, 0.1, 7, 3, seed=11)
    assert torch.equal(a1, a2) and a1.shape == (logreg.n_params,)


# ------------------------------------------------------------------- evaluate
def test_memorised_tiny_set_scores_one():
    m = tiny_model(num_classes=3)
    b = tiny_batch(n=10, seed=4)
    p = models.local_train(m, m.init_params(0), b, lr=2.0, steps=500, batch_size=10)
    assert models.evaluate(m, p, b)[1] == 1.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_random_params_near_chance(seed):
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.random((2000, 1, 16, 16)).astype(np.float32))
    test = data.Batch(x, torch.arange(2000) % 10, 10)
    m = models.Model(models.ModelSpec("small-cnn", test.image_shape, 10))
    _, acc = models.evaluate(m, m.init_params(seed), test)
    assert 0.05 <= acc <= 0.15


def test_evaluate_bit_identical(logreg):
    b = tiny_batch(n=30)
    p = logreg.init_params(0) + 0.5
    assert models.evaluate(logreg, p, b) == models.evaluate(logreg, p, b)


def test_param_count_conserved():
    m = tiny_model("small-cnn", side=10)
    p = m.init_params(5)
    assert p.shape == (m.n_params,)
    assert models.local_train(m, p, tiny_batch(side=10), 0.1, 2).shape == (m.n_params,)
    assert loss_and_grad(m, p, tiny_batch(side=10))[1].shape == (m.n_params,)
    assert torch.equal(m.init_params(5), p)


# ------------------------------------------------------------- total variation
def test_tv_examples():
    assert total_variation(np.full((3, 3), 0.7)) == 0.0
    assert total_variation(np.array([[0.0, 1.0], [0.0, 1.0]])) == 2.0
    with pytest.raises(ValueError):
        total_variation(np.zeros((1, 4)))


@given(
    st.lists(st.floats(-5, 5), min_size=9, max_size=9),
    st.floats(-10, 10),
)
def test_tv_homogeneity(values, c):
    x = np.array(values).reshape(3, 3)
    assert total_variation(c * x) == pytest.approx(abs(c) * total_variation(x), rel=1e-9, abs=1e-9)


# ------------------------------------------------------------ inversion pixel grad
@pytest.mark.parametrize("seed", range(10))
def test_ig_pixel_grad_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m = tiny_model()
    params = torch.from_numpy(rng.normal(size=m.n_params))
    target = torch.from_numpy(rng.normal(size=m.n_params))
    dummy = tiny_batch(n=3, seed=100 + seed)
    beta = 0.05
    g = ig_pixel_grad(m, dummy, target, params, beta)

    def f(x):
        return ig_objective(m, data.Batch(x, dummy.y, dummy.num_classes), target, params, beta, with_grad=False)[0]

    fd = central_diff(f, dummy.x, range(dummy.x.numel()))
    assert rel_err(g.reshape(-1).numpy(), fd) < 1e-4


def test_ig_beta_zero_is_cosine_term_only(logreg):
    rng = np.random.default_rng(0)
    params = torch.from_numpy(rng.normal(size=logreg.n_params))
    target = torch.from_numpy(rng.normal(size=logreg.n_params))
    dummy = tiny_batch(n=2)
    x = dummy.x.clone().requires_grad_(True)
    gp = logreg.param_grad(params.requires_grad_(True), x, dummy.y, create_graph=True)
    cos_term = 1 - torch.dot(gp, target) / (gp.norm() * target.norm())
    (expected,) = torch.autograd.grad(cos_term, x)
    torch.testing.assert_close(ig_pixel_grad(logreg, dummy, target, params.detach(), 0.0), expected)


def test_ig_tv_gradient_vanishes_on_constant_image(logreg):
    rng = np.random.default_rng(1)
    params = torch.from_numpy(rng.normal(size=logreg.n_params))
    target = torch.from_numpy(rng.normal(size=logreg.n_params))
    dummy = data.Batch(torch.full((2, 1, 4, 4), 0.4, dtype=torch.float64), torch.tensor([0, 2]), 3)
    torch.testing.assert_close(
        ig_pixel_grad(logreg, dummy, target, params, 0.5), ig_pixel_grad(logreg, dummy, target, params, 0.0)
    )


def test_ig_zero_target_rejected(logreg):
    with pytest.raises(ValueError):
        ig_pixel_grad(logreg, tiny_batch(n=2), torch.zeros(logreg.n_params, dtype=torch.float64), logreg.init_params(0), 0.0)
