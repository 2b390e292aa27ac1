"""l-infinity constrained sign-gradient attacks on encoder feature distances.

Inputs may carry a leading batch axis; every quantity is per sample, so a batch
of ``B`` images runs ``B`` independent attacks in lock-step.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from umigrat import core, persist
from umigrat.core import NodeRef, Record


@dataclass(frozen=True)
class AttackBudget:
    epsilon: float = 10 / 255
    alpha: float = 2 / 255
    iterations: int = 10
    p: int = 2
    momentum_decay: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.iterations < 1:
            raise ValueError("at least one iteration is required")
        if self.alpha > 2 * self.epsilon:
            raise ValueError("alpha larger than the ball diameter")
        if self.p not in (1, 2):
            raise ValueError("loss norm must be 1 or 2")
        if self.momentum_decay < 0:
            raise ValueError("momentum decay must be non-negative")

    @classmethod
    def from_255(cls, eps255=10.0, alpha255=2.0, **kw) -> "AttackBudget":
        return cls(epsilon=eps255 / 255.0, alpha=alpha255 / 255.0, **kw)


@dataclass
class Perturbation:
    delta: np.ndarray
    anchor: str
    budget: AttackBudget
    flags: set = field(default_factory=set)


@dataclass
class AttackTrace:
    losses: np.ndarray  # (T, ...) surrogate feature loss after each step
    init_loss: np.ndarray
    best_index: np.ndarray  # -1 marks the initial iterate
    best_loss: np.ndarray
    wall_clock: np.ndarray  # seconds per iteration
    step_norms: np.ndarray  # l-inf norm of the applied change per iteration
    stationary: np.ndarray  # (T, ...) zero gradient at that iteration
    init_delta: np.ndarray
    last_delta: np.ndarray
    noise: np.ndarray | None = None  # (T, ..., m-1)
    momentum_norms: np.ndarray | None = None

    def __len__(self):
        return len(self.losses)

    def rows(self):
        """Per-iteration rows (iteration, mean loss, max step norm, seconds)."""
        for t in range(len(self.losses)):
            yield (t + 1, float(np.mean(self.losses[t])), float(np.max(self.step_norms[t])),
                   float(self.wall_clock[t]))


def anchor_fingerprint(x) -> str:
    return persist.fingerprint_arrays(x)


def project(delta, anchor, budget: AttackBudget) -> np.ndarray:
    """Clip ``delta`` into the l-inf ball and keep ``anchor + delta`` inside [0, 1].

    Both constraints are folded into one per-coordinate interval, which makes the
    map idempotent in floating point.
    """
    delta = np.asarray(delta, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    lo = np.maximum(-budget.epsilon, -anchor)
    hi = np.minimum(budget.epsilon, 1.0 - anchor)
    return np.minimum(np.maximum(delta, lo), hi)


def sign_step(delta, grad, alpha) -> np.ndarray:
    """Unprojected ascent step ``delta + alpha * sign(grad)`` with sign(0) = 0."""
    return delta + alpha * np.sign(grad)


# ----------------------------------------------------------------------------- records

def pool_to(width: int, dim: int) -> np.ndarray | None:
    """Matrix mapping a ``width`` vector to ``dim`` entries (bin means or zero-padding)."""
    if width == dim:
        return None
    p = np.zeros((dim, width))
    if width > dim:
        for k, idx in enumerate(np.array_split(np.arange(width), dim)):
            p[k, idx] = 1.0 / len(idx)
    else:
        p[np.arange(width), np.arange(width)] = 1.0
    return p


@lru_cache(maxsize=64)
def feature_record(model, p: int):
    """Inputs ``[x_adv, clean_embedding]``; output the per-sample l_p distance."""
    rec = Record()
    x = rec.input((model.input_dim,))
    clean = rec.input((model.embed_dim,))
    emb = model.build(rec, x)[-1]
    rec.set_output(rec.norm(rec.sub(emb, clean), p))
    return rec


@lru_cache(maxsize=64)
def gr_record(model, p: int):
    """Gradient-robust loss record.

    Inputs ``[x_adv, y_1..y_m (clean module outputs), eps_1..eps_{m-1}]`` with each
    noise input shaped ``(..., 1)``. Returns ``(record, feature_loss_node)``.
    """
    rec = Record()
    m = model.m
    x = rec.input((model.input_dim,))
    clean = [rec.input((w,)) for w in model.widths]
    eps = [rec.input((1,)) for _ in range(m - 1)]
    outs = model.build(rec, x)
    final = rec.sub(outs[-1], clean[-1])
    feature = rec.norm(final, p)
    acc = final
    c = 1.0 / (m - 1)
    for i in range(m - 1):
        d = rec.sub(outs[i], clean[i])
        pool = pool_to(model.widths[i], model.embed_dim)
        if pool is not None:
            d = rec.affine(d, rec.const(pool))
        acc = rec.add(acc, rec.scale(rec.scale(d, NodeRef(eps[i])), c))
    rec.set_output(rec.norm(acc, p))
    return rec, feature


@lru_cache(maxsize=64)
def adapt_record(model, p: int):
    """Inputs ``[x, y_tilde]``; output ``|| pooled(f(x)) - y_tilde ||_p``."""
    rec = Record()
    x = rec.input((model.input_dim,))
    yt = rec.input((model.embed_dim // model.pool_tokens,))
    emb = model.build(rec, x)[-1]
    pooled = rec.affine(emb, rec.const(model.pool_matrix))
    rec.set_output(rec.norm(rec.sub(pooled, yt), p))
    return rec


def _clean_embedding(model, x):
    return model.embed(x, collect_intermediates=False)[0]


def feature_loss(model, x_clean, x_adv, p: int = 2):
    """l_p distance between final embeddings of clean and adversarial inputs."""
    clean = _clean_embedding(model, x_clean)
    return core.forward(feature_record(model, p), [np.asarray(x_adv, dtype=np.float64), clean])


def _noise_inputs(noise, m, batch_shape):
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1] != m - 1:
        raise ValueError(f"expected {m - 1} noise values, got {noise.shape[-1]}")
    noise = np.broadcast_to(noise, tuple(batch_shape) + (m - 1,))
    return [noise[..., i:i + 1] for i in range(m - 1)]


def gr_loss(model, x_clean, x_adv, noise, p: int = 2):
    """Gradient-robust loss with fixed per-module noise ``eps_1..eps_{m-1}``."""
    x_adv = np.asarray(x_adv, dtype=np.float64)
    clean = model.embed(x_clean)
    rec, _ = gr_record(model, p)
    return core.forward(rec, [x_adv] + clean + _noise_inputs(noise, model.m, x_adv.shape[:-1]))


def gr_loss_grad(model, x_clean, x_adv, noise, p: int = 2):
    """Gradient of :func:`gr_loss` with respect to ``x_adv``."""
    x_adv = np.asarray(x_adv, dtype=np.float64)
    clean = model.embed(x_clean)
    rec, _ = gr_record(model, p)
    inputs = [x_adv] + clean + _noise_inputs(noise, model.m, x_adv.shape[:-1])
    _, _, (g,) = core.value_and_grad(rec, inputs, [0])
    return g


# ----------------------------------------------------------------------------- attack loop

def _attack_loop(objective, evaluate_loss, x, budget, init, steps, momentum=None):
    """Shared sign-gradient loop.

    ``objective(x_adv, t)`` returns (feature loss at x_adv, ascent gradient);
    ``evaluate_loss(x_adv)`` returns the feature loss only. ``momentum`` None
    gives plain sign steps, otherwise l1-normalised gradient accumulation.
    """
    batch = x.shape[:-1]
    delta = project(init, x, budget)
    init_delta = delta.copy()
    losses = np.zeros((steps,) + batch)
    step_norms = np.zeros((steps,) + batch)
    stationary = np.zeros((steps,) + batch, dtype=bool)
    clock = np.zeros(steps)
    mom_norms = None if momentum is None else np.zeros((steps,) + batch)
    acc = np.zeros_like(delta)
    best_delta = delta.copy()
    best_loss = None
    best_index = np.full(batch, -1)
    init_loss = None

    def track(t, loss):
        nonlocal best_loss
        better = loss > best_loss
        best_loss = np.where(better, loss, best_loss)
        best_delta[...] = np.where(better[..., None], delta, best_delta)
        best_index[...] = np.where(better, t, best_index)

    for t in range(steps):
        start = time.perf_counter()
        loss, grad = objective(x + delta, t)
        if t == 0:
            init_loss = np.array(loss, copy=True)
            best_loss = init_loss.copy()
        else:
            losses[t - 1] = loss
            track(t - 1, loss)
        dead = ~np.any(grad != 0, axis=-1)
        stationary[t] = dead
        if momentum is None:
            direction = np.sign(grad)
        else:
            l1 = np.abs(grad).sum(axis=-1, keepdims=True)
            normed = np.where(l1 > 0, grad / np.where(l1 > 0, l1, 1.0), 0.0)
            acc = momentum * acc + normed
            mom_norms[t] = np.abs(acc).sum(axis=-1)
            direction = np.sign(acc)
        direction = np.where(dead[..., None], 0.0, direction)
        new = project(delta + budget.alpha * direction, x, budget)
        step_norms[t] = np.abs(new - delta).max(axis=-1)
        delta = new
        clock[t] = time.perf_counter() - start
    final = evaluate_loss(x + delta)
    losses[steps - 1] = final
    track(steps - 1, final)
    trace = AttackTrace(losses=losses, init_loss=init_loss, best_index=best_index,
                        best_loss=best_loss, wall_clock=clock, step_norms=step_norms,
                        stationary=stationary, init_delta=init_delta, last_delta=delta,
                        momentum_norms=mom_norms)
    return best_delta, trace


def _feature_objective(model, x, p):
    rec = feature_record(model, p)
    clean = _clean_embedding(model, x)

    def objective(x_adv, t):
        loss, _, (g,) = core.value_and_grad(rec, [x_adv, clean], [0])
        return loss, g

    def evaluate_loss(x_adv):
        return core.forward(rec, [x_adv, clean])

    return objective, evaluate_loss


def _finish(delta, trace, x, budget, extra_flags=()):
    flags = set(extra_flags)
    if np.all(trace.stationary):
        flags.add("stationary")
    return Perturbation(delta, anchor_fingerprint(x), budget, flags), trace


def _init_delta(x, init):
    if init is None:
        return np.zeros_like(x)
    d = init.delta if isinstance(init, Perturbation) else init
    return np.broadcast_to(np.asarray(d, dtype=np.float64), x.shape).copy()


def ifgsm(model, x, budget: AttackBudget, init=None):
    """Iterative FGSM on the feature distance; returns the best iterate and its trace."""
    x = np.asarray(x, dtype=np.float64)
    objective, evaluate_loss = _feature_objective(model, x, budget.p)
    delta, trace = _attack_loop(objective, evaluate_loss, x, budget, _init_delta(x, init),
                                budget.iterations)
    return _finish(delta, trace, x, budget)


def mifgsm(model, x, budget: AttackBudget, init=None):
    """Momentum iterative FGSM (decay ``budget.momentum_decay``, l1-normalised gradients)."""
    x = np.asarray(x, dtype=np.float64)
    objective, evaluate_loss = _feature_objective(model, x, budget.p)
    delta, trace = _attack_loop(objective, evaluate_loss, x, budget, _init_delta(x, init),
                                budget.iterations, momentum=budget.momentum_decay)
    return _finish(delta, trace, x, budget)


def random_start(x, radius, seed, indices=None) -> np.ndarray:
    """Uniform start in ``[-radius, radius]`` drawn per input from ``(seed, index)``."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    idx = range(len(flat)) if indices is None else indices
    out = np.stack([np.random.default_rng([seed, int(i), 0x5A]).uniform(-radius, radius, flat.shape[1])
                    for i in idx])
    return out.reshape(x.shape)


# ----------------------------------------------------------------------------- adaptation + GR

def adapt_loss(model, x, y_tilde, p: int = 2):
    return core.forward(adapt_record(model, p), [np.asarray(x, dtype=np.float64),
                                                  np.asarray(y_tilde, dtype=np.float64)])


def adapt_init(model, x_tau, umi_delta, y_tilde, alpha_adp=4 / 255, direction="algorithm-literal",
               budget: AttackBudget | None = None, p: int = 2) -> np.ndarray:
    """One FGSM step on the domain-adaptation loss added to the universal perturbation.

    ``algorithm-literal`` ascends the adaptation loss, ``minimize`` descends it.
    Returns ``project(umi_delta + delta_adp)``.
    """
    budget = budget or AttackBudget()
    if direction not in ("algorithm-literal", "minimize"):
        raise ValueError(f"unknown adaptation direction {direction!r}")
    x_tau = np.asarray(x_tau, dtype=np.float64)
    base = np.broadcast_to(np.asarray(umi_delta, dtype=np.float64), x_tau.shape)
    if alpha_adp == 0:
        return project(base, x_tau, budget)
    rec = adapt_record(model, p)
    yt = np.broadcast_to(np.asarray(y_tilde, dtype=np.float64), x_tau.shape[:-1] + (model.embed_dim // model.pool_tokens,))
    _, _, (g,) = core.value_and_grad(rec, [x_tau, yt], [0])
    sgn = 1.0 if direction == "algorithm-literal" else -1.0
    return project(base + sgn * alpha_adp * np.sign(g), x_tau, budget)


def draw_noise(seed, steps, m, sigma, mean=0.0, batch_shape=(), indices=None) -> np.ndarray:
    """Noise of shape ``(steps, *batch, m-1)``; each input owns the stream ``(seed, index)``."""
    n = int(np.prod(batch_shape)) if batch_shape else 1
    idx = range(n) if indices is None else indices
    per = [np.random.default_rng([seed, int(i), 0x6E]).normal(mean, sigma, size=(steps, m - 1))
           for i in idx]
    arr = np.stack(per, axis=1)  # (steps, n, m-1)
    return arr.reshape((steps,) + tuple(batch_shape) + (m - 1,))


def gr_attack(model, x_tau, budget: AttackBudget, umi=None, sigma=0.5, seed=0, y_tilde=None,
              alpha_adp=4 / 255, direction="algorithm-literal", momentum=None, noise=None,
              noise_mean=0.0, indices=None):
    """Gradient-robust attack started from an adapted universal perturbation.

    ``umi`` is an artifact with a ``delta`` attribute, a raw array, or None
    (zero). Adaptation runs when ``y_tilde`` is given and ``alpha_adp > 0``.
    ``noise`` replays stored draws instead of sampling. ``momentum`` None gives
    plain sign steps.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x = np.asarray(x_tau, dtype=np.float64)
    batch = x.shape[:-1]
    m = model.m
    umi_delta = np.zeros_like(x) if umi is None else np.broadcast_to(
        np.asarray(getattr(umi, "delta", umi), dtype=np.float64), x.shape)
    if y_tilde is not None and alpha_adp > 0:
        init = adapt_init(model, x, umi_delta, y_tilde, alpha_adp, direction, budget, budget.p)
    else:
        init = project(umi_delta, x, budget)
    if noise is None:
        noise = draw_noise(seed, budget.iterations, m, sigma, noise_mean, batch, indices)
    noise = np.asarray(noise, dtype=np.float64)
    rec, feat_node = gr_record(model, budget.p)
    clean = model.embed(x)

    def objective(x_adv, t):
        inputs = [x_adv] + clean + _noise_inputs(noise[t], m, batch)
        _, values, (g,) = core.value_and_grad(rec, inputs, [0])
        return values[feat_node], g

    def evaluate_loss(x_adv):
        return core.forward(feature_record(model, budget.p), [x_adv, clean[-1]])

    delta, trace = _attack_loop(objective, evaluate_loss, x, budget, init, budget.iterations, momentum)
    trace.noise = noise
    return _finish(delta, trace, x, budget)


def save_perturbation(path, pert: Perturbation, seed: int = 0) -> str:
    meta = {"anchor": pert.anchor, "flags": sorted(pert.flags),
            "budget": {k: getattr(pert.budget, k) for k in pert.budget.__dataclass_fields__}}
    return persist.write_artifact(path, "perturbation", meta, {"delta": pert.delta}, seed=seed)


def load_perturbation(path) -> Perturbation:
    _, meta, t = persist.read_artifact(path, kind="perturbation")
    return Perturbation(t["delta"], meta["anchor"], AttackBudget(**meta["budget"]), set(meta["flags"]))


def trace_rows(trace: AttackTrace):
    return list(trace.rows())
