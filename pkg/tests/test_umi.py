import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from umigrat import attacks, umi
from umigrat.attacks import AttackBudget, project
from umigrat.models import Module, SequentialModel

from helpers import random_net

K = 1 / 255


def _model(seed=0):
    return random_net(np.random.default_rng(seed), [6, 7, 5, 4])


def _inputs(seed, n, d=6):
    return np.random.default_rng(seed).uniform(0.05, 0.95, (n, d))


def _scalar_linear(w):
    """Two-module model on one pixel whose embedding is ``w * x``."""
    first = Module(np.array([[w]]), np.zeros(1), norm=False, act="none")
    ident = Module(np.eye(1), np.zeros(1), norm=False, act="none")
    return SequentialModel((first, ident), (1,), 1)


# ----------------------------------------------------------------------------- u_mu1

def test_one_step_equals_one_ifgsm_step():
    model = _model(1)
    x = _inputs(1, 3)
    d0 = attacks.random_start(x, K, 0)
    _, trace = attacks.ifgsm(model, x, AttackBudget(iterations=1), init=d0)
    np.testing.assert_array_equal(umi.u_mu1(d0, model, x, AttackBudget(), t=1), trace.last_delta)


def test_five_steps_match_ifgsm_trace():
    model = _model(2)
    x = _inputs(2, 4)
    d0 = attacks.random_start(x, K, 1)
    _, trace = attacks.ifgsm(model, x, AttackBudget(iterations=5), init=d0)
    out = umi.u_mu1(d0, model, x, AttackBudget(), t=5)
    np.testing.assert_array_equal(out, trace.last_delta)
    rec = attacks.feature_record(model, 2)
    clean = model.embed(x, collect_intermediates=False)[0]
    np.testing.assert_array_equal(umi._u_mu1_fast(d0, rec, clean, x, AttackBudget(), 5), out)


def test_zero_gradient_returns_projected_delta():
    model = _model(3)
    x = _inputs(3, 2)
    d = np.full(6, 0.5)
    # the distance has a zero gradient at the clean input itself
    out = umi.u_mu1(np.zeros(6), model, x, AttackBudget(), t=3)
    np.testing.assert_array_equal(out, np.zeros_like(x))
    zero = Module(np.zeros((2, 6)), np.zeros(2), norm=False, act="none")
    flat = SequentialModel((zero, Module(np.eye(2), np.zeros(2), norm=False, act="none")), (6,), 1)
    np.testing.assert_array_equal(umi.u_mu1(d, flat, x, AttackBudget(), t=3),
                                  project(np.broadcast_to(d, x.shape), x, AttackBudget()))


def test_u_mu1_rejects_zero_steps():
    with pytest.raises(ValueError):
        umi.u_mu1(np.zeros(6), _model(), _inputs(0, 1), AttackBudget(), t=0)


# ----------------------------------------------------------------------------- u_mu2

def test_threshold_already_met_returns_delta_unchanged():
    model = _model(4)
    x = _inputs(4, 1)
    d = attacks.random_start(x, 4 * K, 2)
    loss = attacks.feature_loss(model, x, x + d)
    res = umi.u_mu2(d, model, x, float(loss[0]) / 2, umi.epsilon_schedule(10 * K))
    assert res.reached and res.steps == 0
    np.testing.assert_array_equal(res.delta, d)


def test_unreachable_threshold_flags_not_reached():
    model = _model(5)
    x = _inputs(5, 1)
    res = umi.u_mu2(attacks.random_start(x, K, 0), model, x, 1e12, umi.epsilon_schedule(10 * K), t=5)
    assert not res.reached and res.steps == 5
    assert np.abs(res.delta).max() <= 10 * K + 1e-12


@pytest.mark.parametrize("w,lam", [(2.0, 0.05), (-3.0, 0.04), (1.0, 0.02)])
def test_search_matches_closed_form_minimum(w, lam):
    model = _scalar_linear(w)
    x = np.array([[0.5]])
    start = np.array([[1e-6]])
    b = AttackBudget()
    res = umi.u_mu2(start, model, x, lam, umi.epsilon_schedule(b.epsilon), t=10, budget=b)
    assert res.reached
    change = float(np.abs(res.delta - start).max())
    assert abs(change - lam / abs(w)) <= b.alpha


@pytest.mark.parametrize("schedule", [[], [0.02, 0.01], [0.1]])
def test_bad_schedules_rejected(schedule):
    with pytest.raises(ValueError):
        umi.u_mu2(np.zeros(6), _model(), _inputs(0, 1), 0.1, schedule)


def test_schedule_ramps_to_epsilon():
    s = umi.epsilon_schedule(0.04, 4)
    np.testing.assert_allclose(s, [0.01, 0.02, 0.03, 0.04], rtol=0, atol=1e-17)


# ----------------------------------------------------------------------------- Reptile

def test_reptile_arithmetic_example():
    out = umi.reptile_update(np.zeros(1), [np.array([2 * K]), np.array([4 * K])], 1.0)
    assert out[0] == 3 * K


def test_reptile_fixed_point_and_zero_step():
    d = np.array([0.01, -0.02, 0.03])
    assert np.array_equal(umi.reptile_update(d, [d, d], 1.0), d)
    assert np.array_equal(umi.reptile_update(d, [d + 0.1, d - 0.3], 0.0), d)


@given(st.integers(0, 10_000), st.floats(0, 2))
def test_reptile_matches_hand_rolled_expression(seed, eta):
    rng = np.random.default_rng(seed)
    d, a, b = rng.uniform(-0.04, 0.04, (3, 8))
    expected = d + (eta / 2) * ((a - d) + (b - d))
    np.testing.assert_allclose(umi.reptile_update(d, [a, b], eta), expected, rtol=0, atol=1e-12)


# ----------------------------------------------------------------------------- fooling rate

def test_null_perturbation_fools_nothing():
    model = _model(6)
    assert umi.fooling_rate(np.zeros(6), model, _inputs(6, 20), 1e-9) == 0.0


def test_zero_threshold_counts_every_changed_sample():
    model = _model(7)
    assert umi.fooling_rate(np.full(6, 2 * K), model, _inputs(7, 20), 0.0) == 1.0


def test_fooling_rate_matches_loop():
    model = _model(8)
    xs = _inputs(8, 30)
    d = np.random.default_rng(8).uniform(-10 * K, 10 * K, 6)
    lam = 0.05
    hits = 0
    for x in xs:
        e0 = model.embed(x, collect_intermediates=False)[0]
        e1 = model.embed(x + d, collect_intermediates=False)[0]
        hits += np.sqrt(((e1 - e0) ** 2).sum()) > lam
    assert umi.fooling_rate(d, model, xs, lam) == hits / len(xs)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        umi.fooling_rate(np.zeros(6), _model(), np.zeros((0, 6)), 0.1)
    with pytest.raises(ValueError):
        umi.train_umi(_model(), np.zeros((0, 6)))


def test_lambda_calibration_uses_pair_distances():
    model = _model(9)
    xs = _inputs(9, 10)
    emb = model.embed(xs, collect_intermediates=False)[0]
    pairs = [np.linalg.norm(emb[2 * i] - emb[2 * i + 1]) for i in range(5)]
    assert umi.calibrate_lambda(model, xs, 0.25) == pytest.approx(0.25 * np.median(pairs), rel=1e-15)


# ----------------------------------------------------------------------------- training

@pytest.fixture(scope="module")
def trained(small_foundation, small_natural):
    cfg = umi.UmiConfig(rounds=2)
    art = umi.train_umi(small_foundation, small_natural[:60], cfg, seed=1)
    return art


def test_training_keeps_delta_in_the_ball(trained):
    assert np.abs(trained.delta).max() <= trained.epsilon + 1e-12
    assert 0.0 <= trained.fooling_rate_at_train <= 1.0
    assert len(trained.history) == 2
    assert trained.epsilon_schedule[-1] == pytest.approx(trained.epsilon)


def test_zero_meta_step_leaves_delta_unchanged(small_foundation, small_natural):
    xs = small_natural[:20]
    still = umi.train_umi(small_foundation, xs, umi.UmiConfig(rounds=2, eta=0.0), seed=4)
    start = umi.train_umi(small_foundation, xs, umi.UmiConfig(rounds=0), seed=4)
    np.testing.assert_array_equal(still.delta, start.delta)


def test_divergence_guard_rolls_back(small_foundation, small_natural):
    xs = small_natural[:20]
    start = umi.train_umi(small_foundation, xs, umi.UmiConfig(rounds=0), seed=5)
    with pytest.warns(UserWarning, match="rolled back"):
        art = umi.train_umi(small_foundation, xs, umi.UmiConfig(rounds=1, rollback_drop=-1.0), seed=5)
    np.testing.assert_array_equal(art.delta, start.delta)
    assert art.history[0]["rolled_back"] and art.flags


def test_training_is_deterministic(small_foundation, small_natural):
    xs = small_natural[:20]
    a = umi.train_umi(small_foundation, xs, umi.UmiConfig(rounds=1), seed=6)
    b = umi.train_umi(small_foundation, xs, umi.UmiConfig(rounds=1), seed=6)
    assert np.array_equal(a.delta, b.delta)


def test_umi_round_trip(tmp_path, trained):
    umi.save_umi(tmp_path / "u.umgr", trained)
    back = umi.load_umi(tmp_path / "u.umgr")
    np.testing.assert_array_equal(back.delta, trained.delta.astype(np.float32).astype(np.float64))
    assert back.lam == trained.lam and back.history == trained.history
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        umi.save_umi(tmp_path / "u2.umgr", back)
    assert np.array_equal(umi.load_umi(tmp_path / "u2.umgr").delta, back.delta)
