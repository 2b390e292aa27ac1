"""Surrogate foundation encoders and the victims fine-tuned from them.

Weights live on a dyadic grid (multiples of ``2**-40``) so that adding and then
removing a weight delta is exact in float64.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from umigrat import core, persist
from umigrat.core import NodeRef, Record

GRID = 2.0 ** -40


def snap(a) -> np.ndarray:
    """Round to the weight grid."""
    return np.round(np.asarray(a, dtype=np.float64) / GRID) * GRID


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Module:
    """One encoder block: affine, optional layer norm, optional pointwise nonlinearity."""

    weight: np.ndarray
    bias: np.ndarray
    norm: bool = True
    act: str = "gelu"  # gelu | tanh | none

    def __post_init__(self):
        w = _frozen(snap(self.weight))
        b = _frozen(snap(self.bias))
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ValueError(f"weight {w.shape} and bias {b.shape} are incompatible")
        if self.act not in ("gelu", "tanh", "none"):
            raise ValueError(f"unknown activation {self.act!r}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def build(self, rec: Record, x: int, weight: int | None = None, bias: int | None = None,
              lora=None) -> int:
        w = rec.const(self.weight) if weight is None else weight
        b = rec.const(self.bias) if bias is None else bias
        h = rec.affine(x, w, b)
        if lora is not None:
            down, up, dbias = lora
            h = rec.add(h, rec.affine(rec.affine(x, down), up, dbias))
        return self._tail(rec, h)

    def _tail(self, rec: Record, h: int) -> int:
        if self.norm:
            h = rec.layernorm(h)
        if self.act == "gelu":
            h = rec.gelu(h)
        elif self.act == "tanh":
            h = rec.tanh(h)
        return h

    def __call__(self, y):
        rec = Record()
        xi = rec.input((self.in_dim,))
        rec.set_output(self.build(rec, xi))
        return core.forward(rec, [y])


@dataclass(frozen=True, eq=False)
class SequentialModel:
    """Ordered stack of modules; ``embed`` exposes every module output."""

    modules: tuple
    input_shape: tuple = (16, 16)
    pool_tokens: int = 8
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        mods = tuple(self.modules)
        object.__setattr__(self, "modules", mods)
        if len(mods) < 2:
            raise ValueError("a sequential model needs at least two modules")
        if mods[0].in_dim != int(np.prod(self.input_shape)):
            raise ValueError("first module does not accept the input shape")
        for i in range(1, len(mods)):
            if mods[i].in_dim != mods[i - 1].out_dim:
                raise ValueError(f"module {i} expects {mods[i].in_dim} inputs, "
                                 f"module {i - 1} emits {mods[i - 1].out_dim}")
        if self.embed_dim % self.pool_tokens:
            raise ValueError("embedding dimension must be divisible by pool_tokens")

    @property
    def m(self) -> int:
        return len(self.modules)

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def embed_dim(self) -> int:
        return self.modules[-1].out_dim

    @property
    def widths(self) -> list:
        return [mod.out_dim for mod in self.modules]

    @cached_property
    def fingerprint(self) -> str:
        arrays = []
        for mod in self.modules:
            arrays += [mod.weight, mod.bias]
        return persist.fingerprint_arrays(*arrays)

    @cached_property
    def pool_matrix(self) -> np.ndarray:
        """Mean over tokens with the embedding laid out as (tokens, channels)."""
        ch = self.embed_dim // self.pool_tokens
        p = np.zeros((ch, self.embed_dim))
        for t in range(self.pool_tokens):
            p[np.arange(ch), t * ch + np.arange(ch)] = 1.0 / self.pool_tokens
        return p

    def pooled(self, embedding):
        return np.asarray(embedding) @ self.pool_matrix.T

    def build(self, rec: Record, x: int, params=None, lora=None) -> list:
        """Append the encoder to ``rec``; returns the node of every module output."""
        outs = []
        h = x
        for i, mod in enumerate(self.modules):
            w, b = (None, None) if params is None else params[i]
            h = mod.build(rec, h, w, b, None if lora is None else lora[i])
            outs.append(h)
        return outs

    @cached_property
    def _embed_record(self):
        rec = Record()
        xi = rec.input((self.input_dim,))
        outs = self.build(rec, xi)
        rec.set_output(outs[-1])
        return rec, outs

    def embed(self, x, collect_intermediates: bool = True) -> list:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise core.ShapeError(0, f"input has {x.shape[-1]} features, model expects {self.input_dim}")
        rec, outs = self._embed_record
        vals = core.evaluate(rec, [x])
        if collect_intermediates:
            return [vals[o] for o in outs]
        return [vals[outs[-1]]]

    def params_norm(self) -> float:
        return float(np.sqrt(sum((mod.weight ** 2).sum() + (mod.bias ** 2).sum()
                                 for mod in self.modules)))

    def with_weights(self, weights, biases, info=None) -> "SequentialModel":
        mods = tuple(Module(w, b, mod.norm, mod.act) for mod, w, b in zip(self.modules, weights, biases))
        return SequentialModel(mods, self.input_shape, self.pool_tokens, dict(info or {}))


# ----------------------------------------------------------------------------- deltas

@dataclass(frozen=True, eq=False)
class ModuleDelta:
    up: np.ndarray  # out x r
    down: np.ndarray  # r x in
    gain: float
    bias: np.ndarray

    @cached_property
    def dense(self) -> np.ndarray:
        return snap(self.gain * (self.up @ self.down))

    @cached_property
    def dense_bias(self) -> np.ndarray:
        return snap(self.bias)


@dataclass(frozen=True, eq=False)
class WeightDelta:
    modules: tuple
    rank: int
    magnitude: float

    def measure(self, base: SequentialModel) -> float:
        num = sum((d.dense ** 2).sum() + (d.dense_bias ** 2).sum() for d in self.modules)
        return float(np.sqrt(num)) / base.params_norm()


def zero_delta(model: SequentialModel, rank: int = 1) -> WeightDelta:
    mods = tuple(ModuleDelta(np.zeros((mod.out_dim, rank)), np.zeros((rank, mod.in_dim)), 0.0,
                             np.zeros(mod.out_dim)) for mod in model.modules)
    return WeightDelta(mods, rank, 0.0)


def apply_delta(model: SequentialModel, delta: WeightDelta, sign: int = 1, info=None) -> SequentialModel:
    if len(delta.modules) != model.m:
        raise ValueError("delta and model have different module counts")
    ws = [mod.weight + sign * d.dense for mod, d in zip(model.modules, delta.modules)]
    bs = [mod.bias + sign * d.dense_bias for mod, d in zip(model.modules, delta.modules)]
    return model.with_weights(ws, bs, info)


def remove_delta(model: SequentialModel, delta: WeightDelta) -> SequentialModel:
    return apply_delta(model, delta, sign=-1)


def delta_contribution(module: Module, mdelta: ModuleDelta, y) -> np.ndarray:
    """h(y) = f_{phi + dphi}(y) - f_phi(y) evaluated through the low-rank factors."""
    y = np.asarray(y, dtype=np.float64)
    pre = y @ module.weight.T + module.bias
    dpre = mdelta.gain * ((y @ mdelta.down.T) @ mdelta.up.T) + mdelta.bias
    rec = Record()
    hi = rec.input((module.out_dim,))
    rec.set_output(module._tail(rec, hi))
    return core.forward(rec, [pre + dpre]) - core.forward(rec, [pre])


# ----------------------------------------------------------------------------- training

@dataclass
class ArchConfig:
    depth: int = 6
    width: int = 64
    embed_dim: int = 64
    input_shape: tuple = (16, 16)
    act: str = "gelu"
    norm: bool = True
    pool_tokens: int = 8
    # denoising proxy objective
    noise: float = 0.05
    epochs: int = 60
    batch: int = 64
    lr: float = 2e-3
    plateau_tol: float = 1e-3
    patience: int = 3
    target_loss: float = 0.0
    holdout: int = 200


class Adam:
    def __init__(self, params, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _init_weights(rng, dims):
    ws, bs = [], []
    for din, dout in zip(dims[:-1], dims[1:]):
        ws.append(rng.standard_normal((dout, din)) / np.sqrt(din))
        bs.append(np.zeros(dout))
    return ws, bs


def _mse(rec: Record, pred: int, target: int) -> int:
    d = rec.sub(pred, target)
    return rec.mean(rec.scale(d, NodeRef(d)))


def _skeleton(cfg: ArchConfig, ws, bs) -> SequentialModel:
    mods = tuple(Module(w, b, cfg.norm, cfg.act) for w, b in zip(ws, bs))
    return SequentialModel(mods, tuple(cfg.input_shape), cfg.pool_tokens)


def _denoise_record(template: SequentialModel, out_dim: int):
    rec = Record()
    x_noisy = rec.input((template.input_dim,))
    x_clean = rec.input((out_dim,))
    params = [(rec.input(), rec.input()) for _ in template.modules]
    hw, hb = rec.input(), rec.input()
    emb = template.build(rec, x_noisy, params)[-1]
    pred = rec.affine(emb, hw, hb)
    rec.set_output(_mse(rec, pred, x_clean))
    return rec


def build_foundation(cfg: ArchConfig, data: np.ndarray, seed: int) -> SequentialModel:
    """Train an encoder (plus a discarded linear head) to denoise ``data``.

    The returned model carries ``info`` with the loss history, held-out loss
    before and after training and a ``converged`` flag.
    """
    if cfg.depth < 2:
        raise ValueError("depth must be at least 2")
    rng = np.random.default_rng([seed, 0xF0])
    data = np.asarray(data, dtype=np.float64)
    hold, train = data[:cfg.holdout], data[cfg.holdout:]
    if len(train) == 0:
        raise ValueError("no training data left after the held-out split")
    din = int(np.prod(cfg.input_shape))
    dims = [din] + [cfg.width] * (cfg.depth - 1) + [cfg.embed_dim]
    ws, bs = _init_weights(rng, dims)
    hw = rng.standard_normal((din, cfg.embed_dim)) / np.sqrt(cfg.embed_dim)
    hb = np.full(din, 0.5)
    template = _skeleton(cfg, ws, bs)
    rec = _denoise_record(template, din)
    params = [p for pair in zip(ws, bs) for p in pair] + [hw, hb]
    wrt = list(range(2, 2 + len(params)))
    opt = Adam(params, lr=cfg.lr)

    hold_noise = np.random.default_rng([seed, 0xF1]).standard_normal(hold.shape) * cfg.noise

    def hold_loss():
        if len(hold) == 0:
            return float("nan")
        return float(core.forward(rec, [hold + hold_noise, hold] + params))

    loss_init = hold_loss()
    history = []
    converged = False
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(train), cfg.batch):
            xb = train[order[start:start + cfg.batch]]
            noisy = xb + cfg.noise * rng.standard_normal(xb.shape)
            loss, _, grads = core.value_and_grad(rec, [noisy, xb] + params, wrt)
            opt.step(grads)
            total += float(loss) * len(xb)
        history.append(total / len(train))
        if history[-1] <= cfg.target_loss:
            converged = True
            break
        if len(history) > cfg.patience:
            prev = history[-1 - cfg.patience]
            if (prev - history[-1]) / max(prev, 1e-300) < cfg.plateau_tol:
                converged = True
                break
    if not converged:
        warnings.warn(f"foundation training did not plateau in {cfg.epochs} epochs", stacklevel=2)
    info = {"seed": seed, "history": history, "holdout_loss_init": loss_init,
            "holdout_loss_final": hold_loss(), "converged": converged, "epochs": len(history)}
    n = len(ws)
    return template.with_weights(params[0:2 * n:2], params[1:2 * n:2], info)


def foundation_from_arrays(weights, biases, input_shape=(16, 16), act="gelu", norm=True,
                           pool_tokens=8, info=None) -> SequentialModel:
    mods = tuple(Module(w, b, norm, act) for w, b in zip(weights, biases))
    return SequentialModel(mods, tuple(input_shape), pool_tokens, dict(info or {}))


# ----------------------------------------------------------------------------- victims

@dataclass
class FinetuneConfig:
    rank: int = 4
    steps: int = 150
    batch: int = 32
    lr: float = 3e-3
    task_block: int = 4
    val_fraction: float = 0.2


@dataclass(frozen=True, eq=False)
class TaskHead:
    """Linear regression head on the final embedding (not part of the encoder)."""

    weight: np.ndarray
    bias: np.ndarray
    loss: str = "mse"

    def __call__(self, embedding):
        return np.asarray(embedding) @ self.weight.T + self.bias


def _lowrank_factors(rng, base: SequentialModel, rank: int, strength: float):
    deltas = []
    for mod in base.modules:
        up = rng.standard_normal((mod.out_dim, rank))
        down = rng.standard_normal((rank, mod.in_dim))
        scale = np.linalg.norm(up @ down)
        pnorm = np.sqrt((mod.weight ** 2).sum() + (mod.bias ** 2).sum())
        deltas.append((up, down, strength * pnorm / scale))
    return deltas


def _finetune_record(base: SequentialModel, task_dim: int):
    rec = Record()
    x = rec.input((base.input_dim,))
    y = rec.input((task_dim,))
    lora = [(rec.input(), rec.input(), rec.input()) for _ in base.modules]
    hw, hb = rec.input(), rec.input()
    emb = base.build(rec, x, lora=lora)[-1]
    pred = rec.affine(emb, hw, hb)
    rec.set_output(_mse(rec, pred, y))
    return rec


def _train_task(base, data, targets, cfg, rng, lora_init, strength, train_lora):
    """Adam on the task head (and LoRA factors when ``train_lora``); returns params and val loss."""
    n_val = max(1, int(round(cfg.val_fraction * len(data))))
    xtr, ytr = data[n_val:], targets[n_val:]
    xva, yva = data[:n_val], targets[:n_val]
    task_dim = targets.shape[1]
    rec = _finetune_record(base, task_dim)
    lora = [[d.copy(), u.copy(), db.copy()] for d, u, db in lora_init]
    hw = rng.standard_normal((task_dim, base.embed_dim)) / np.sqrt(base.embed_dim)
    hb = np.full(task_dim, float(ytr.mean()))
    flat_lora = [p for trio in lora for p in trio]
    params = flat_lora + [hw, hb]
    n_lora = len(flat_lora)
    wrt = list(range(2, 2 + len(params))) if train_lora else list(range(2 + n_lora, 4 + n_lora))
    trainable = params if train_lora else [hw, hb]
    opt = Adam(trainable, lr=cfg.lr)
    pnorm = base.params_norm()
    for _ in range(cfg.steps):
        idx = rng.choice(len(xtr), size=min(cfg.batch, len(xtr)), replace=False)
        _, _, grads = core.value_and_grad(rec, [xtr[idx], ytr[idx]] + params, wrt)
        opt.step(grads)
        if train_lora:
            mag = np.sqrt(sum(((u @ d) ** 2).sum() + (db ** 2).sum() for d, u, db in lora)) / pnorm
            if mag > strength:
                s = strength / mag
                for _, u, db in lora:
                    u *= s
                    db *= s
    val = float(core.forward(rec, [xva, yva] + params))
    return lora, TaskHead(hw.copy(), hb.copy()), val


def derive_victim(base: SequentialModel, mode: str, strength: float, seed: int,
                  data=None, targets=None, rank: int = 4, cfg: FinetuneConfig | None = None):
    """Victim encoder ``base + delta`` and the delta that produced it.

    ``lowrank`` samples a rank-``rank`` delta per module at Frobenius ratio
    ``strength``; ``finetune`` trains LoRA factors and a fresh task head on
    ``(data, targets)`` with the ratio capped at ``strength``; ``both`` starts
    the fine-tune from a sampled low-rank delta.
    """
    if not 0.0 < strength <= 1.0:
        raise ValueError(f"strength must lie in (0, 1], got {strength}")
    if mode not in ("lowrank", "finetune", "both"):
        raise ValueError(f"unknown victim mode {mode!r}")
    cfg = cfg or FinetuneConfig(rank=rank)
    rng = np.random.default_rng([seed, 0xD1])
    if mode == "lowrank":
        mods = tuple(ModuleDelta(u, d, g, np.zeros(u.shape[0]))
                     for u, d, g in _lowrank_factors(rng, base, cfg.rank, strength))
        delta = WeightDelta(mods, cfg.rank, 0.0)
        delta = WeightDelta(mods, cfg.rank, delta.measure(base))
        info = {"mode": mode, "strength": strength, "seed": seed}
        return apply_delta(base, delta, info=info), delta

    if data is None or targets is None:
        raise ValueError("finetune mode needs a downstream dataset and targets")
    data = np.asarray(data, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != base.input_dim:
        raise ValueError(f"downstream data has shape {data.shape}, model expects (*, {base.input_dim})")
    if mode == "both":
        init = [(d, g * u, np.zeros(u.shape[0])) for u, d, g in _lowrank_factors(rng, base, cfg.rank, strength)]
    else:
        init = [(rng.standard_normal((cfg.rank, mod.in_dim)) / np.sqrt(mod.in_dim),
                 np.zeros((mod.out_dim, cfg.rank)), np.zeros(mod.out_dim)) for mod in base.modules]
    head_seed = int(rng.integers(2 ** 32))
    lora, head, victim_loss = _train_task(base, data, targets, cfg, np.random.default_rng(head_seed),
                                          init, strength, True)
    zero = [(np.zeros_like(d), np.zeros_like(u), np.zeros_like(db)) for d, u, db in init]
    _, _, base_loss = _train_task(base, data, targets, cfg, np.random.default_rng(head_seed),
                                  zero, strength, False)
    mods = tuple(ModuleDelta(u, d, 1.0, db) for d, u, db in lora)
    delta = WeightDelta(mods, cfg.rank, 0.0)
    delta = WeightDelta(mods, cfg.rank, delta.measure(base))
    info = {"mode": mode, "strength": strength, "seed": seed, "head": head,
            "task_loss_victim": victim_loss, "task_loss_base": base_loss}
    return apply_delta(base, delta, info=info), delta


# ----------------------------------------------------------------------------- persistence

def save_model(path, model: SequentialModel, seed: int = 0) -> str:
    meta = {"input_shape": list(model.input_shape), "pool_tokens": model.pool_tokens,
            "modules": [{"norm": m.norm, "act": m.act} for m in model.modules],
            "info": {k: v for k, v in model.info.items() if _jsonable(v)}}
    tensors = {}
    for i, mod in enumerate(model.modules):
        tensors[f"w{i}"] = mod.weight
        tensors[f"b{i}"] = mod.bias
    return persist.write_artifact(path, "model", meta, tensors, seed=seed)


def load_model(path) -> SequentialModel:
    _, meta, t = persist.read_artifact(path, kind="model")
    mods = tuple(Module(t[f"w{i}"], t[f"b{i}"], spec["norm"], spec["act"])
                 for i, spec in enumerate(meta["modules"]))
    return SequentialModel(mods, tuple(meta["input_shape"]), meta["pool_tokens"], meta["info"])


def save_delta(path, delta: WeightDelta, seed: int = 0) -> str:
    tensors = {}
    for i, d in enumerate(delta.modules):
        tensors[f"up{i}"] = d.up
        tensors[f"down{i}"] = d.down
        tensors[f"bias{i}"] = d.bias
    meta = {"rank": delta.rank, "magnitude": delta.magnitude,
            "gains": [d.gain for d in delta.modules]}
    return persist.write_artifact(path, "weight_delta", meta, tensors, seed=seed)


def load_delta(path) -> WeightDelta:
    _, meta, t = persist.read_artifact(path, kind="weight_delta")
    mods = tuple(ModuleDelta(t[f"up{i}"], t[f"down{i}"], g, t[f"bias{i}"])
                 for i, g in enumerate(meta["gains"]))
    return WeightDelta(mods, meta["rank"], meta["magnitude"])


def _jsonable(v) -> bool:
    return isinstance(v, (int, float, str, bool, list, type(None)))
