import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flarena import aggregators, attacks, cues, data, engine, models
from flarena.aggregators import weighted_aggregate
from flarena.defense import (
    AdaAggConfig,
    AdaAggDefense,
    InversionConfig,
    apply_threshold,
    compute_reward,
    effective_weights,
    mask_cues,
    normalize_scores,
    penalized_aggregate,
    raw_scores,
    update_h,
)
from flarena.td3 import TD3Config

simplex = arrays(np.float64, 4, elements=st.floats(0.01, 1)).map(lambda a: a / a.sum())
positive = st.floats(1e-6, 1.0)


# -------------------------------------------------------------------- scoring
def test_raw_score_examples():
    state = np.array([[0.9, 0.8, 0.7, 0.6], [0.2, 0.5, 0.1, 0.3]])
    np.testing.assert_array_equal(raw_scores(state, [1, 0, 0, 0]), state[:, 0])
    assert raw_scores(state[:1], [0.25] * 4)[0] == pytest.approx(0.75)
    same = raw_scores(np.tile(state[1], (3, 1)), [0.1, 0.2, 0.3, 0.4])
    assert same[0] == same[1] == same[2]
    with pytest.raises(ValueError):
        raw_scores(state, [0.5, 0.5, 0.5, 0.0])


def test_normalize_examples():
    np.testing.assert_allclose(normalize_scores([0.5, 0.5, 0.5]), [1 / 3] * 3)
    w = normalize_scores([0.2, 0.8], kappa=0.05)
    np.testing.assert_allclose(w, [0.0769231 / 1.0769231, 1 / 1.0769231], rtol=1e-6)
    np.testing.assert_allclose(w, [0.0714, 0.9286], atol=1e-4)


@given(st.lists(positive, min_size=1, max_size=10))
def test_normalize_preserves_order_and_sums_to_one(scores):
    w = normalize_scores(scores)
    assert (w > 0).all() and abs(w.sum() - 1) < 1e-12
    s = np.asarray(scores)
    for i in range(len(s)):
        for j in range(len(s)):
            if s[i] < s[j]:
                assert w[i] < w[j]


def test_threshold_examples():
    w, ex = apply_threshold([0.7, 0.3], 0.5)
    assert w.tolist() == [0.7, 0.0] and ex.tolist() == [False, True]
    w, ex = apply_threshold([0.2, 0.5, 0.3], 0.0)
    assert not ex.any()
    w, ex = apply_threshold([0.2, 0.5, 0.3], 1.0)
    assert ex.all() and not w.any()


@given(st.lists(positive, min_size=1, max_size=10), st.floats(0, 1), st.floats(0, 1))
def test_exclusion_monotone_in_b(scores, b1, b2):
    w_tilde = normalize_scores(scores)
    lo, hi = min(b1, b2), max(b1, b2)
    ex_lo, ex_hi = apply_threshold(w_tilde, lo)[1], apply_threshold(w_tilde, hi)[1]
    assert np.all(ex_hi >= ex_lo)


# -------------------------------------------------------------------- counters
def test_update_h_examples():
    h = update_h([True, False, False], [0, 1, 2], {0: 0, 1: 3, 2: 0, 9: 4})
    assert h == {0: 1, 1: 2, 2: 0, 9: 4}


@given(
    st.dictionaries(st.integers(0, 20), st.integers(0, 10)),
    st.lists(st.tuples(st.integers(0, 20), st.booleans()), unique_by=lambda p: p[0], min_size=1),
)
def test_h_dynamics(h, sampled):
    ids = [k for k, _ in sampled]
    new = update_h([e for _, e in sampled], ids, h)
    for k in set(h) | set(ids):
        step = new.get(k, 0) - h.get(k, 0)
        assert step in (-1, 0, 1) and new.get(k, 0) >= 0
        if k not in ids:
            assert new.get(k, 0) == h.get(k, 0)


# ----------------------------------------------------------------- aggregation
def test_penalized_examples():
    ups = [torch.tensor([3.0, 0.0], dtype=torch.float64), torch.tensor([0.0, 3.0], dtype=torch.float64)]
    np.testing.assert_allclose(effective_weights([0.5, 0.5], [1, 0], 2.0), [1 / 3, 2 / 3])
    torch.testing.assert_close(penalized_aggregate(ups, [0.5, 0.5], [1, 0], 2.0, ups[0]), torch.tensor([1.0, 2.0], dtype=torch.float64))
    prev = torch.tensor([7.0, 7.0], dtype=torch.float64)
    assert torch.equal(penalized_aggregate(ups, [0.0, 0.0], [0, 0], 2.0, prev), prev)


@given(
    arrays(np.float64, (5, 3), elements=st.floats(-10, 10)),
    arrays(np.float64, 5, elements=st.floats(0, 1)),
    arrays(np.int64, 5, elements=st.integers(0, 6)),
)
def test_lambda_one_collapses_to_weighted_fedavg(rows, w, h):
    ups = [torch.from_numpy(r) for r in rows]
    prev = torch.zeros(3, dtype=torch.float64)
    out = penalized_aggregate(ups, w, h, 1.0, prev)
    if w.sum() > 0:
        assert torch.equal(out, weighted_aggregate(ups, w))
    else:
        assert torch.equal(out, prev)


@given(arrays(np.float64, 6, elements=st.floats(0, 1)), arrays(np.int64, 6, elements=st.integers(0, 8)), st.floats(1, 4))
def test_weight_conservation(w, h, lam):
    e = effective_weights(w, h, lam)
    assert (e >= 0).all()
    if (w > 0).any():
        assert abs(e.sum() - 1) <= 1e-12


def test_reward_examples():
    assert compute_reward(0.9, 0.7) == pytest.approx(0.2)
    assert compute_reward(0.5, 0.5) == 0
    assert compute_reward(0.5, 0.9) == pytest.approx(-0.4)
    with pytest.raises(ValueError):
        compute_reward(float("nan"), 0.1)


@given(arrays(np.float64, (3, 4), elements=st.floats(1e-6, 1)), simplex, st.lists(st.booleans(), min_size=4, max_size=4).filter(any))
def test_cue_mask_zeroes_columns_and_renormalises(state, a, mask):
    ms, ma = mask_cues(state, a, mask)
    m = np.array(mask)
    assert np.all(ms[:, ~m] == 0) and np.array_equal(ms[:, m], state[:, m])
    assert np.all(ma[~m] == 0) and abs(ma.sum() - 1) < 1e-12
    np.testing.assert_allclose(ma[m], a[m] / a[m].sum())


# --------------------------------------------------------------- end to end
class FixedPolicy:
    """Stands in for the TD3 agent with a constant raw action."""

    def __init__(self, agent, raw):
        self.agent, self.raw = agent, np.asarray(raw, dtype=np.float64)

    def __getattr__(self, name):
        return getattr(self.agent, name)

    def select_action(self, state, explore=True):
        return self.raw


@pytest.fixture(scope="module")
def world():
    train = data.make_blobs(900, num_classes=4, side=12, cells=4, seed=0, layout_seed=0)
    test = data.make_blobs(300, num_classes=4, side=12, cells=4, seed=1, layout_seed=0)
    root = data.make_blobs(500, num_classes=4, side=12, cells=4, seed=2, layout_seed=0)
    model = models.Model(models.ModelSpec("logreg", train.image_shape, 4))
    ext_model = models.Model(models.ModelSpec("small-cnn", train.image_shape, 4))
    extractor = cues.train_feature_extractor(ext_model, root, seed=0, epochs=1)
    assignment = engine.partition_noniid(train.y.numpy(), 8, 0.25, 4, seed=0, n_malicious=2)
    fed = engine.Federation(model, train, assignment, test, lr=0.1, batch_size=32, rounds=5)
    return fed, extractor, root


def make_defense(fed, extractor, val, raw=None, lam=2.0):
    cfg = AdaAggConfig(lam=lam, td3=TD3Config(hidden=(16, 16), batch_size=4, warmup=2))
    d = AdaAggDefense(fed.model, extractor, val, 4, cfg, InversionConfig(4, 5), seed=0)
    if raw is not None:
        d.agent = FixedPolicy(d.agent, raw)
    return d


class NaNAttack(attacks.Attack):
    def craft(self, ctx):
        return [torch.full_like(ctx.global_params, float("nan")) for _ in ctx.malicious_ids]


def test_nan_attacker_gets_zero_weight_and_a_strike(world):
    fed, extractor, root = world
    d = make_defense(fed, extractor, root)
    g = fed.model.init_params(0)
    plan = engine.RoundPlan(0, [0, 3, 4, 6], 0)
    new, rec = engine.run_round(fed, g, plan, NaNAttack(), d)
    assert torch.isfinite(new).all()
    row = next(r for r in rec.clients if r["client_id"] == 0)
    assert row["quarantined"] and row["excluded"] and row["h"] == 1 and row["w_tilde"] > 0
    assert 0 in rec.excluded and rec.reward is not None
    assert all(v >= 0 for v in rec.times_ms.values())


def test_no_threshold_tracks_fedavg(world):
    fed, extractor, root = world
    d = make_defense(fed, extractor, root, raw=[0, 0, 0, 0, -30.0])
    ga = gb = fed.model.init_params(0)
    for t in range(5):
        plan = engine.sample_round(8, 0.5, t, 0)
        ga, ra = engine.run_round(fed, ga, plan, attacks.NoAttack(), d)
        gb, rb = engine.run_round(fed, gb, plan, attacks.NoAttack(), aggregators.FedAvg())
        assert ra.excluded == []
    assert abs(ra.test_acc - rb.test_acc) <= 0.05
    assert float((ga - gb).norm()) <= 0.25 * float(gb.norm())


def test_adaagg_round_deterministic(world):
    fed, extractor, root = world

    def run():
        d = make_defense(fed, extractor, root)
        g = fed.model.init_params(0)
        recs = []
        for t in range(4):
            g, r = engine.run_round(fed, g, engine.sample_round(8, 0.5, t, 1), attacks.IPMAttack(), d)
            recs.append((r.test_acc, r.test_loss, r.reward, r.excluded, r.clients))
        return g, recs

    (g1, r1), (g2, r2) = run(), run()
    assert torch.equal(g1, g2) and r1 == r2


def test_all_excluded_keeps_previous_global(world):
    fed, extractor, root = world
    d = make_defense(fed, extractor, root, raw=[0, 0, 0, 0, 40.0])
    g = fed.model.init_params(0) + 0.01
    plan = engine.RoundPlan(0, [2, 3, 4, 5], 0)
    new, rec = engine.run_round(fed, g, plan, attacks.NoAttack(), d)
    assert torch.equal(new, g)
    assert rec.excluded == [2, 3, 4, 5] and all(r["h"] == 1 for r in rec.clients)
