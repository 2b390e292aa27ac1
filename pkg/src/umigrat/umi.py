"""Offline learning of a universal meta-initialization (UMI).

Two inner objectives are run over the natural dataset and merged with a
Reptile step once per meta-round:

* ``u_mu1`` -- ``t`` projected sign-ascent steps on the feature distance, the
  fast-adaptability objective;
* ``u_mu2`` -- the smallest change (searched over a growing l-inf bound) that
  pushes the feature distance above the success threshold ``lambda``, the
  universal-effectiveness objective.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from umigrat import core, persist
from umigrat.attacks import AttackBudget, _attack_loop, _feature_objective, feature_loss, project, feature_record


@dataclass
class UmiConfig:
    rounds: int = 7  # T_m
    eta: float = 1.0
    inner_steps: int = 5  # t
    lam: float | None = None  # None: calibrate from the data
    lam_fraction: float = 0.25
    phases: int = 4
    holdout: float = 0.2
    rollback_drop: float = 0.5
    # the feature distance has zero gradient at delta = 0, so start slightly off it
    init_radius: float = 1 / 255


@dataclass
class UmiArtifact:
    delta: np.ndarray
    eta: float
    rounds: int
    inner_steps: int
    lam: float
    epsilon_schedule: list
    dataset_fingerprint: str
    model_fingerprint: str
    fooling_rate_at_train: float
    epsilon: float = 10 / 255
    alpha: float = 2 / 255
    p: int = 2
    history: list = field(default_factory=list)
    flags: list = field(default_factory=list)


class SearchResult(NamedTuple):
    delta: np.ndarray
    reached: bool
    steps: int


def u_mu1(delta, model, x, budget: AttackBudget, t: int = 5) -> np.ndarray:
    """``t`` projected sign-ascent steps on the feature distance starting at ``delta``."""
    if t < 1:
        raise ValueError("t must be at least 1")
    x = np.asarray(x, dtype=np.float64)
    objective, evaluate_loss = _feature_objective(model, x, budget.p)
    init = np.broadcast_to(np.asarray(delta, dtype=np.float64), x.shape)
    _, trace = _attack_loop(objective, evaluate_loss, x, budget, init, t)
    return trace.last_delta


def _u_mu1_fast(delta, rec, clean, x, budget, t):
    # same arithmetic as u_mu1 without the trace bookkeeping
    d = project(delta, x, budget)
    for _ in range(t):
        _, _, (g,) = core.value_and_grad(rec, [x + d, clean], [0])
        d = project(d + budget.alpha * np.sign(g), x, budget)
    return d


def epsilon_schedule(epsilon: float, phases: int = 4) -> list:
    """Linear ramp of l-inf bounds from ``epsilon / phases`` up to ``epsilon``."""
    return [epsilon * (k + 1) / phases for k in range(phases)]


def _phase_bound(schedule, j, t):
    return schedule[min(j * len(schedule) // t, len(schedule) - 1)]


def u_mu2(delta, model, x, lam: float, schedule, t: int = 5, budget: AttackBudget | None = None,
          _rec=None, _clean=None) -> SearchResult:
    """Search for a small change of ``delta`` that lifts the feature distance above ``lam``.

    Sign steps are taken with the change clipped to the current phase bound of
    ``schedule``; the first iterate whose loss exceeds ``lam`` is returned.
    """
    if not schedule:
        raise ValueError("empty epsilon schedule")
    if any(b > a + 1e-15 for a, b in zip(schedule[1:], schedule[:-1])):
        raise ValueError("epsilon schedule must be nondecreasing")
    budget = budget or AttackBudget()
    if schedule[-1] > budget.epsilon + 1e-15:
        raise ValueError("schedule exceeds the training epsilon")
    x = np.asarray(x, dtype=np.float64)
    rec = _rec or feature_record(model, budget.p)
    clean = _clean if _clean is not None else model.embed(x, collect_intermediates=False)[0]
    start = np.broadcast_to(np.asarray(delta, dtype=np.float64), x.shape)
    cur = start
    for j in range(t + 1):
        loss, _, (g,) = core.value_and_grad(rec, [x + cur, clean], [0])
        if np.all(loss > lam):
            return SearchResult(cur, True, j)
        if j == t:
            break
        bound = _phase_bound(schedule, j, t)
        change = np.clip(cur + budget.alpha * np.sign(g) - start, -bound, bound)
        cur = project(start + change, x, budget)
    return SearchResult(cur, False, t)


def reptile_update(delta, adapted, eta: float) -> np.ndarray:
    """``delta + eta * mean_i(adapted_i - delta)``."""
    delta = np.asarray(delta, dtype=np.float64)
    total = np.zeros_like(delta)
    for a in adapted:
        total = total + (np.asarray(a, dtype=np.float64) - delta)
    return delta + eta * (total / len(adapted))


def fooling_rate(delta, model, dataset, lam: float, p: int = 2) -> float:
    """Fraction of samples whose feature distance under ``delta`` exceeds ``lam``."""
    dataset = np.asarray(dataset, dtype=np.float64)
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    adv = dataset + np.asarray(delta, dtype=np.float64)
    return float(np.mean(feature_loss(model, dataset, adv, p) > lam))


def calibrate_lambda(model, dataset, fraction: float = 0.25, p: int = 2) -> float:
    """``fraction`` times the median distance between embeddings of disjoint clean pairs."""
    emb = model.embed(np.asarray(dataset), collect_intermediates=False)[0]
    n = len(emb) // 2 * 2
    if n == 0:
        raise ValueError("need at least two samples to calibrate lambda")
    dist = np.linalg.norm(emb[0:n:2] - emb[1:n:2], ord=p, axis=1)
    return float(fraction * np.median(dist))


def train_umi(model, dataset, config: UmiConfig | None = None, budget: AttackBudget | None = None,
              seed: int = 0, progress=None) -> UmiArtifact:
    """Learn the universal meta-initialization on ``dataset`` (sequential sweep, fixed order)."""
    config = config or UmiConfig()
    budget = budget or AttackBudget()
    dataset = np.asarray(dataset, dtype=np.float64)
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    n_hold = int(round(config.holdout * len(dataset)))
    if len(dataset) - n_hold < 1:
        raise ValueError("no training samples left after the held-out split")
    train, hold = dataset[:len(dataset) - n_hold], dataset[len(dataset) - n_hold:]
    if len(hold) == 0:
        hold = train
    lam = config.lam if config.lam is not None else calibrate_lambda(model, dataset, config.lam_fraction, budget.p)
    schedule = epsilon_schedule(budget.epsilon, config.phases)
    rec = feature_record(model, budget.p)
    clean_all = model.embed(train, collect_intermediates=False)[0]

    rng = np.random.default_rng([seed, 0x0111])
    delta = rng.uniform(-config.init_radius, config.init_radius, model.input_dim)
    history, flags = [], []
    rate = fooling_rate(delta, model, hold, lam, budget.p)
    for r in range(config.rounds):
        d1 = delta.copy()
        d2 = delta.copy()
        reached = 0
        for i in range(len(train)):
            x = train[i:i + 1]
            clean = clean_all[i:i + 1]
            d1 = _u_mu1_fast(d1, rec, clean, x, budget, config.inner_steps)[0]
            res = u_mu2(d2, model, x, lam, schedule, config.inner_steps, budget, rec, clean)
            d2 = res.delta[0]
            reached += res.reached
        # the universal delta is only bounded by the ball; image range is handled per input
        new = np.clip(reptile_update(delta, [d1, d2], config.eta), -budget.epsilon, budget.epsilon)
        new_rate = fooling_rate(new, model, hold, lam, budget.p)
        entry = {"round": r, "fooling_rate": new_rate, "mu2_reached": reached / len(train)}
        if rate - new_rate > config.rollback_drop:
            entry["rolled_back"] = True
            flags.append(f"round {r} rolled back")
            warnings.warn(f"UMI round {r} dropped the fooling rate by {rate - new_rate:.2f}; rolled back",
                          stacklevel=2)
        else:
            delta, rate = new, new_rate
        history.append(entry)
        if progress is not None:
            progress(entry)
    from umigrat.data import dataset_fingerprint
    return UmiArtifact(delta=delta, eta=config.eta, rounds=config.rounds, inner_steps=config.inner_steps,
                       lam=lam, epsilon_schedule=schedule, dataset_fingerprint=dataset_fingerprint(dataset),
                       model_fingerprint=model.fingerprint, fooling_rate_at_train=rate,
                       epsilon=budget.epsilon, alpha=budget.alpha, p=budget.p, history=history, flags=flags)


def save_umi(path, art: UmiArtifact, seed: int = 0) -> str:
    meta = {k: getattr(art, k) for k in art.__dataclass_fields__ if k != "delta"}
    return persist.write_artifact(path, "umi", meta, {"delta": art.delta}, seed=seed)


def load_umi(path) -> UmiArtifact:
    _, meta, t = persist.read_artifact(path, kind="umi")
    return UmiArtifact(delta=t["delta"], **meta)
