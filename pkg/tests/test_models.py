import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from umigrat import attacks, core, data, models
from umigrat.models import Module, SequentialModel

from helpers import lowrank_delta, random_net


def _quiet_foundation(cfg, x, seed):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return models.build_foundation(cfg, x, seed)


def test_foundation_is_deterministic():
    x = data.sample_natural(data.DatasetSpec(count=300, seed=7))
    cfg = models.ArchConfig(epochs=3, holdout=50)
    a = _quiet_foundation(cfg, x, 7)
    b = _quiet_foundation(cfg, x, 7)
    assert a.m == 6 and a.widths == [64] * 6
    for ma, mb in zip(a.modules, b.modules):
        assert np.array_equal(ma.weight, mb.weight) and np.array_equal(ma.bias, mb.bias)


def test_minimal_two_module_foundation(small_natural):
    cfg = models.ArchConfig(depth=2, width=16, embed_dim=8, input_shape=(8, 8), epochs=5, holdout=50)
    model = _quiet_foundation(cfg, small_natural, 1)
    assert model.m == 2


def test_training_reduces_held_out_loss(small_foundation):
    info = small_foundation.info
    assert info["holdout_loss_final"] < info["holdout_loss_init"]


def test_non_converged_training_warns(small_natural):
    cfg = models.ArchConfig(depth=2, width=8, embed_dim=8, input_shape=(8, 8), epochs=1, holdout=50)
    with pytest.warns(UserWarning, match="plateau"):
        model = models.build_foundation(cfg, small_natural, 0)
    assert model.info["converged"] is False


def test_single_module_model_rejected():
    with pytest.raises(ValueError):
        SequentialModel((Module(np.eye(4), np.zeros(4)),), (4,), 1)


def test_incompatible_dimensions_rejected():
    with pytest.raises(ValueError):
        SequentialModel((Module(np.ones((3, 4)), np.zeros(3)), Module(np.ones((2, 5)), np.zeros(2))), (4,), 1)


def test_identity_modules_compose_to_identity():
    ident = Module(np.eye(4), np.zeros(4), norm=False, act="none")
    model = SequentialModel((ident, ident), (4,), 1)
    x = np.array([0.1, 0.7, 0.3, 0.9])
    ys = model.embed(x)
    assert len(ys) == 2
    np.testing.assert_array_equal(ys[-1], x)


def test_embedding_matches_module_replay(small_foundation, small_natural):
    x = small_natural[:3]
    ys = small_foundation.embed(x)
    assert len(ys) == small_foundation.m
    y = x
    for mod, expected in zip(small_foundation.modules, ys):
        y = mod(y)
        np.testing.assert_array_equal(y, expected)
    assert len(small_foundation.embed(x, collect_intermediates=False)) == 1


def test_embed_rejects_wrong_width(small_foundation):
    with pytest.raises(core.ShapeError):
        small_foundation.embed(np.zeros(10))


@pytest.mark.parametrize("strength", [0.0, -0.1, 1.5])
def test_strength_outside_range_rejected(small_foundation, strength):
    with pytest.raises(ValueError):
        models.derive_victim(small_foundation, "lowrank", strength, 0)


def test_lowrank_victim_has_requested_ratio(small_foundation):
    victim, delta = models.derive_victim(small_foundation, "lowrank", 0.1, seed=4)
    assert abs(delta.magnitude - 0.1) < 1e-9
    assert abs(delta.measure(small_foundation) - delta.magnitude) < 1e-12
    rebuilt = models.apply_delta(small_foundation, delta)
    for a, b in zip(rebuilt.modules, victim.modules):
        assert np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)


def _shifted(count, seed, shape=(8, 8)):
    base = data.DatasetSpec(count=count, shape=shape, seed=seed)
    spec = data.DatasetSpec(kind="shifted", count=count, shape=shape, seed=seed, gamma=2.2, band=(0.6, 4.0),
                            band_gain=1.5)
    return data.sample_shifted(spec, base)


def test_finetune_beats_base_on_downstream_validation(small_foundation):
    x = _shifted(300, 5)
    y = data.task_targets(x, (8, 8), block=2)
    victim, delta = models.derive_victim(small_foundation, "finetune", 0.2, 1, data=x, targets=y,
                                         cfg=models.FinetuneConfig(steps=200))
    assert victim.info["task_loss_victim"] < victim.info["task_loss_base"]
    assert delta.magnitude <= 0.2 + 1e-9
    assert abs(delta.measure(small_foundation) - delta.magnitude) < 1e-12


def test_both_mode_runs(small_foundation):
    x = _shifted(120, 6)
    y = data.task_targets(x, (8, 8), block=2)
    victim, delta = models.derive_victim(small_foundation, "both", 0.1, 2, data=x, targets=y,
                                         cfg=models.FinetuneConfig(steps=20))
    assert 0 < delta.magnitude <= 0.1 + 1e-9


def test_finetune_needs_matching_data(small_foundation):
    with pytest.raises(ValueError):
        models.derive_victim(small_foundation, "finetune", 0.1, 0)
    with pytest.raises(ValueError):
        models.derive_victim(small_foundation, "finetune", 0.1, 0, data=np.zeros((10, 30)), targets=np.zeros((10, 4)))


def test_zero_delta_leaves_embeddings_bit_identical(small_foundation, small_natural):
    same = models.apply_delta(small_foundation, models.zero_delta(small_foundation))
    x = small_natural[:10]
    for a, b in zip(same.embed(x), small_foundation.embed(x)):
        assert np.array_equal(a, b)


@given(st.integers(0, 10_000), st.floats(1e-3, 2.0))
def test_apply_then_remove_is_exact(seed, scale):
    rng = np.random.default_rng(seed)
    model = random_net(rng, [6, 5, 4])
    delta = lowrank_delta(rng, model, rank=2, scale=scale)
    back = models.remove_delta(models.apply_delta(model, delta), delta)
    for a, b in zip(back.modules, model.modules):
        assert np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)


@given(st.integers(0, 10_000))
def test_module_decomposition_identity(seed):
    rng = np.random.default_rng(seed)
    model = random_net(rng, [5, 6, 4], act=["gelu", "tanh"][seed % 2])
    delta = lowrank_delta(rng, model, rank=2, scale=0.3)
    victim = models.apply_delta(model, delta)
    for i, (mod, vmod) in enumerate(zip(model.modules, victim.modules)):
        y = rng.standard_normal((3, mod.in_dim))
        np.testing.assert_allclose(vmod(y) - mod(y), models.delta_contribution(mod, delta.modules[i], y),
                                   rtol=0, atol=1e-10)


def test_gradient_disparity_grows_with_strength(small_foundation, small_natural):
    x = small_natural[200:240]
    start = attacks.random_start(x, 1 / 255, 0)

    def grad(model):
        rec = attacks.feature_record(model, 2)
        clean = model.embed(x, collect_intermediates=False)[0]
        return core.value_and_grad(rec, [x + start, clean], [0])[2][0]

    g_base = grad(small_foundation)
    medians = []
    for strength in (0.05, 0.1, 0.2, 0.4):
        cos = []
        for seed in range(10):
            victim, _ = models.derive_victim(small_foundation, "lowrank", strength, seed)
            g = grad(victim)
            num = (g * g_base).sum(1)
            cos.append(np.median(num / (np.linalg.norm(g, axis=1) * np.linalg.norm(g_base, axis=1))))
        medians.append(np.median(cos))
    assert all(c < 1 for c in medians)
    assert all(a > b for a, b in zip(medians, medians[1:])), medians


def test_model_and_delta_round_trip(tmp_path, small_foundation, small_natural):
    victim, delta = models.derive_victim(small_foundation, "lowrank", 0.1, 3)
    models.save_model(tmp_path / "m.umgr", victim)
    models.save_delta(tmp_path / "d.umgr", delta)
    loaded = models.load_model(tmp_path / "m.umgr")
    x = small_natural[:20]
    a = victim.embed(x, collect_intermediates=False)[0]
    b = loaded.embed(x, collect_intermediates=False)[0]
    assert np.max(np.linalg.norm(a - b, axis=1) / np.linalg.norm(a, axis=1)) <= 1e-6
    d2 = models.load_delta(tmp_path / "d.umgr")
    assert d2.rank == delta.rank and d2.magnitude == delta.magnitude
    models.save_model(tmp_path / "m2.umgr", loaded)
    again = models.load_model(tmp_path / "m2.umgr")
    for p, q in zip(again.modules, loaded.modules):
        assert np.array_equal(p.weight, q.weight) and np.array_equal(p.bias, q.bias)
