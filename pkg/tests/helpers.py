"""Small model factories and independent oracles shared by the tests."""
from __future__ import annotations

import numpy as np

from umigrat import models
from umigrat.models import Module, SequentialModel


def linear_stack(rng, dims, pool_tokens=1, scale=None):
    """Purely linear modules (no norm, no activation) with the given widths."""
    mods = []
    for a, b in zip(dims[:-1], dims[1:]):
        s = scale if scale is not None else 1.0 / np.sqrt(a)
        mods.append(Module(rng.standard_normal((b, a)) * s, rng.standard_normal(b) * 0.1, norm=False, act="none"))
    return SequentialModel(tuple(mods), (dims[0],), pool_tokens)


def random_net(rng, dims, act="gelu", norm=True, pool_tokens=1):
    mods = []
    for a, b in zip(dims[:-1], dims[1:]):
        mods.append(Module(rng.standard_normal((b, a)) / np.sqrt(a), rng.standard_normal(b) * 0.1, norm=norm, act=act))
    return SequentialModel(tuple(mods), (dims[0],), pool_tokens)


def lowrank_delta(rng, model, rank=1, scale=0.1):
    mods = tuple(models.ModuleDelta(rng.standard_normal((m.out_dim, rank)) * scale,
                                    rng.standard_normal((rank, m.in_dim)) * scale, 1.0,
                                    rng.standard_normal(m.out_dim) * scale * 0.1)
                 for m in model.modules)
    d = models.WeightDelta(mods, rank, 0.0)
    return models.WeightDelta(mods, rank, d.measure(model))


def loop_forward(module, y):
    """Scalar-loop evaluation of one module, independent of the tape."""
    y = list(map(float, y))
    w, b = module.weight, module.bias
    h = [b[i] + sum(w[i, j] * y[j] for j in range(len(y))) for i in range(w.shape[0])]
    if module.norm:
        n = len(h)
        mu = sum(h) / n
        var = sum((v - mu) ** 2 for v in h) / n
        h = [(v - mu) / np.sqrt(var + 1e-5) for v in h]
    if module.act == "tanh":
        h = [float(np.tanh(v)) for v in h]
    elif module.act == "gelu":
        from math import erf, sqrt
        h = [v * 0.5 * (1.0 + erf(v / sqrt(2.0))) for v in h]
    return np.array(h)


def central_diff(fun, x, h=1e-6):
    """Gradient of a scalar function by central differences."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    a = np.ravel(a)
    b = np.ravel(b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / den)


def tiny_budget(**kw):
    from umigrat.attacks import AttackBudget
    return AttackBudget(**kw)


# acceptance criterion number -> one-line verdict, printed in the terminal summary
ACCEPTANCE = {}
