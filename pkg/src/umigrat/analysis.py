"""Jacobian-level deviation analysis and transfer measurements.

All Jacobian products here are dense and evaluated per input; ``deviation``
and ``augmented_gradient`` take a single (unbatched) input vector.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from umigrat import core
from umigrat.attacks import anchor_fingerprint, feature_loss, pool_to


def _activations(modules, x):
    """Inputs to every module followed by the final output: [y0=x, y1, ..., ym]."""
    ys = [np.asarray(x, dtype=np.float64)]
    for mod in modules:
        ys.append(mod(ys[-1]))
    return ys


def _jacobians(modules, ys, limit):
    return [core.module_jacobian(mod, y, limit) for mod, y in zip(modules, ys[:-1])]


def _chain(jacs):
    """Cumulative products J_i ... J_1 for i = 1..m."""
    out, acc = [], None
    for j in jacs:
        acc = j if acc is None else j @ acc
        out.append(acc)
    return out


def _vjp_model(modules, x, cot):
    rec = core.Record()
    xi = rec.input((modules[0].in_dim,))
    h = xi
    for mod in modules:
        h = mod.build(rec, h)
    rec.set_output(h)
    return core.vjp(rec, [np.asarray(x, dtype=np.float64)], cot, [0])[0]


def cosine(a, b) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class DeviationReport:
    deviation: np.ndarray  # g (prod(Jf + Jh) - prod Jf), both at victim activations
    victim_gradient: np.ndarray  # end-to-end white-box gradient on the victim
    victim_product: np.ndarray  # g prod(Jf + Jh) from module Jacobians
    surrogate_product: np.ndarray  # g prod Jf at victim activations
    surrogate_gradient: np.ndarray  # end-to-end on the surrogate, own activations
    empirical_gap: np.ndarray  # victim_gradient - surrogate_gradient
    residual: np.ndarray  # deviation - empirical_gap
    chain_rule_error: float  # max |victim_product - victim_gradient|
    cos_victim_surrogate: float
    cos_deviation_gap: float
    norms: dict = field(default_factory=dict)


def deviation(surrogate, victim, delta_weights, x, loss_grad_seed, limit=core.DENSE_JACOBIAN_LIMIT,
              check_delta: bool = True) -> DeviationReport:
    """Update-direction deviation between white-box victim and surrogate attacks.

    Both module-Jacobian products are taken at the victim's activations. The
    end-to-end gradients of both models are reported alongside so the
    activation mismatch shows up as ``residual``.
    """
    if check_delta and delta_weights is not None:
        for mod_s, mod_v, d in zip(surrogate.modules, victim.modules, delta_weights.modules):
            if not (np.array_equal(mod_s.weight + d.dense, mod_v.weight)
                    and np.array_equal(mod_s.bias + d.dense_bias, mod_v.bias)):
                raise ValueError("victim is not surrogate + delta_weights")
    g = np.asarray(loss_grad_seed, dtype=np.float64)
    ys = _activations(victim.modules, x)
    jv = _jacobians(victim.modules, ys, limit)
    js = _jacobians(surrogate.modules, ys, limit)
    pv = g @ _chain(jv)[-1]
    ps = g @ _chain(js)[-1]
    dev = pv - ps
    gv = _vjp_model(victim.modules, x, g)
    gs = _vjp_model(surrogate.modules, x, g)
    gap = gv - gs
    return DeviationReport(
        deviation=dev, victim_gradient=gv, victim_product=pv, surrogate_product=ps,
        surrogate_gradient=gs, empirical_gap=gap, residual=dev - gap,
        chain_rule_error=float(np.max(np.abs(pv - gv))),
        cos_victim_surrogate=cosine(gv, gs), cos_deviation_gap=cosine(dev, gap),
        norms={"deviation": float(np.linalg.norm(dev)), "gap": float(np.linalg.norm(gap)),
               "residual": float(np.linalg.norm(dev - gap)), "victim": float(np.linalg.norm(gv)),
               "surrogate": float(np.linalg.norm(gs))},
    )


@dataclass
class AugmentedGradient:
    plain: np.ndarray  # u prod J
    product: np.ndarray  # augmented block product, all noise orders
    first_order: np.ndarray  # expansion kept to first order in the noise
    residual: np.ndarray  # terms of order >= 2 in the noise; product = first_order + residual
    seed: np.ndarray  # u, gradient of the norm at the combined difference


def _norm_grad(z, p):
    if p == 1:
        return np.sign(z)
    n = np.linalg.norm(z)
    return z / n if n > 0 else np.zeros_like(z)


def augmented_gradient(surrogate, x_clean, x_adv, noise, p: int = 2,
                       limit=core.DENSE_JACOBIAN_LIMIT) -> AugmentedGradient:
    """Noise-augmented update direction from per-module Jacobians at ``x_adv``.

    Module ``i < m`` contributes an exit path ``c * eps_i * P_i J_i...J_1`` to the
    output (``c = 1/(m-1)``, ``P_i`` pools to the embedding width). In the full
    product a path leaving at module ``i`` is additionally scaled by
    ``(1 + eps_j)`` at every later intermediate module ``j``; the first-order
    expansion drops those factors and equals the gradient of the
    gradient-robust loss.
    """
    modules = list(surrogate.modules)
    m = len(modules)
    noise = np.asarray(noise, dtype=np.float64).reshape(-1)
    if noise.size != max(m - 1, 0):
        raise ValueError(f"expected {max(m - 1, 0)} noise values, got {noise.size}")
    ya = _activations(modules, x_adv)
    yc = _activations(modules, x_clean)
    jac = _jacobians(modules, ya, limit)
    cum = _chain(jac)
    emb = modules[-1].out_dim
    d_in = modules[0].in_dim
    c = 1.0 / (m - 1) if m > 1 else 0.0
    pools = [pool_to(mod.out_dim, emb) for mod in modules[:-1]]

    def pooled(i, a):
        return a if pools[i] is None else pools[i] @ a

    z = ya[-1] - yc[-1]
    for i in range(m - 1):
        z = z + c * noise[i] * pooled(i, ya[i + 1] - yc[i + 1])
    u = _norm_grad(z, p)

    plain_mat = cum[-1]
    first = plain_mat.copy()
    for i in range(m - 1):
        first = first + c * noise[i] * pooled(i, cum[i])

    # block product over augmented states (y_i, s_i); s collects the exit paths
    y_blk = np.eye(d_in)  # d y_i / d x
    s_blk = np.zeros((emb, d_in))  # d s_i / d x
    for i in range(m - 1):
        new_y = jac[i] @ y_blk
        s_blk = (1.0 + noise[i]) * s_blk + c * noise[i] * pooled(i, new_y)
        y_blk = new_y
    full = jac[-1] @ y_blk + s_blk

    # terms of order >= 2 in the noise: the (1 + eps_j) factors minus one
    higher = np.zeros_like(first)
    for i in range(m - 1):
        extra = np.prod(1.0 + noise[i + 1:m - 1]) - 1.0
        if noise[i] != 0 and extra != 0:
            higher = higher + c * noise[i] * extra * pooled(i, cum[i])

    return AugmentedGradient(plain=u @ plain_mat, product=u @ full, first_order=u @ first,
                             residual=u @ higher, seed=u)


def cosine_with_flag(delta_a, delta_b):
    """Cosine similarity and a flag set when both vectors are zero."""
    a = np.ravel(delta_a)
    b = np.ravel(delta_b)
    if a.shape != b.shape:
        raise ValueError("perturbations differ in shape")
    both_zero = not a.any() and not b.any()
    return cosine(a, b), both_zero


def perturbation_cosine(delta_a, delta_b) -> float:
    value, both_zero = cosine_with_flag(delta_a, delta_b)
    if both_zero:
        warnings.warn("cosine of two zero perturbations reported as 0", stacklevel=2)
    return value


def rowwise_cosine(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    den = na * nb
    out = np.where(den > 0, (a * b).sum(axis=-1) / np.where(den > 0, den, 1.0), 0.0)
    return np.clip(out, -1.0, 1.0)


@dataclass
class TransferReport:
    surrogate_distance: np.ndarray  # (B,)
    victim_distance: dict  # victim name -> (B,)
    drop_ratio: dict  # victim name -> (B,) victim / surrogate, NaN where undefined
    medians: dict = field(default_factory=dict)
    flags: set = field(default_factory=set)


def transfer_gap(attack_outputs, surrogate, victims, x, p: int = 2) -> TransferReport:
    """Feature distances on the surrogate and each victim for surrogate-made perturbations.

    ``victims`` maps names to models (a list is numbered). The drop ratio is
    victim distance over surrogate distance per input.
    """
    x = np.asarray(x, dtype=np.float64)
    delta = attack_outputs.delta
    if attack_outputs.anchor != anchor_fingerprint(x):
        raise ValueError("perturbation anchor does not match the inputs")
    if not isinstance(victims, dict):
        victims = {f"victim{i}": v for i, v in enumerate(victims)}
    x_adv = x + delta
    s = np.atleast_1d(feature_loss(surrogate, x, x_adv, p))
    report = TransferReport(surrogate_distance=s, victim_distance={}, drop_ratio={})
    report.medians["surrogate"] = float(np.median(s))
    for name, v in victims.items():
        d = np.atleast_1d(feature_loss(v, x, x_adv, p))
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(s > 0, d / np.where(s > 0, s, 1.0), np.nan)
        if np.any(s == 0):
            report.flags.add("undefined_ratio")
        report.victim_distance[name] = d
        report.drop_ratio[name] = ratio
        report.medians[name] = float(np.median(d))
        finite = ratio[np.isfinite(ratio)]
        report.medians[f"{name}_drop_ratio"] = float(np.median(finite)) if finite.size else float("nan")
    return report
