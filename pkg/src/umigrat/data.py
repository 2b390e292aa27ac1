"""Synthetic natural images and domain-shifted downstream images.

Images are 2-D grayscale arrays flattened row-major; pixel domain is [0, 1].
Every item draws from its own generator seeded by ``(seed, index)`` so any
subset can be regenerated independently.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from umigrat import persist


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "natural"  # natural | shifted
    count: int = 2000
    shape: tuple = (16, 16)
    seed: int = 0
    # texture generator
    scales: tuple = (0.8, 1.6, 3.2)
    contrast: float = 0.18
    # shift transform, identity by default
    gamma: float = 1.0
    mix: tuple | None = None  # channel-mix matrix rows; 1x1 for grayscale
    band: tuple | None = None  # (low sigma, high sigma) difference-of-Gaussians
    band_gain: float = 1.0

    def __post_init__(self):
        if self.kind not in ("natural", "shifted"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape))

    def is_identity_shift(self) -> bool:
        mix_identity = self.mix is None or np.array_equal(np.asarray(self.mix), np.eye(len(self.mix)))
        return self.gamma == 1.0 and self.band is None and mix_identity


def _texture(rng, spec: DatasetSpec) -> np.ndarray:
    field_ = np.zeros(spec.shape)
    for s in spec.scales:
        layer = gaussian_filter(rng.standard_normal(spec.shape), s, mode="wrap")
        field_ += rng.uniform(0.5, 1.5) * layer / (layer.std() + 1e-12)
    field_ /= field_.std() + 1e-12
    offset = rng.uniform(-0.1, 0.1)
    return np.clip(0.5 + offset + spec.contrast * field_, 0.0, 1.0)


def sample_natural(spec: DatasetSpec) -> np.ndarray:
    """``count`` procedural textures as an array of shape ``(count, H*W)``."""
    if spec.kind != "natural":
        raise ValueError("sample_natural needs kind='natural'")
    if spec.count <= 0:
        raise ValueError("dataset count must be positive")
    out = np.empty((spec.count, spec.dim))
    for i in range(spec.count):
        rng = np.random.default_rng([spec.seed, i])
        out[i] = _texture(rng, spec).reshape(-1)
    return out


def shift_transform(images: np.ndarray, spec: DatasetSpec) -> np.ndarray:
    """Gamma remap, channel mix and band-pass filtering, clipped back into [0, 1]."""
    x = np.asarray(images, dtype=np.float64)
    flat = x.reshape(-1, spec.dim)
    out = np.empty_like(flat)
    mix = None if spec.mix is None else np.asarray(spec.mix, dtype=np.float64)
    for i, row in enumerate(flat):
        img = row.reshape(spec.shape)
        if spec.gamma != 1.0:
            img = img ** spec.gamma
        if mix is not None:
            # grayscale carries a single channel
            img = mix[0, 0] * img
        if spec.band is not None:
            lo, hi = spec.band
            m = img.mean()
            img = m + spec.band_gain * (gaussian_filter(img, lo, mode="wrap")
                                        - gaussian_filter(img, hi, mode="wrap"))
        out[i] = np.clip(img, 0.0, 1.0).reshape(-1)
    return out.reshape(x.shape)


def sample_shifted(spec: DatasetSpec, base_spec: DatasetSpec) -> np.ndarray:
    """Natural textures (generator settings of ``base_spec``) passed through the shift of ``spec``."""
    if spec.kind != "shifted":
        raise ValueError("sample_shifted needs kind='shifted'")
    if spec.count <= 0:
        raise ValueError("dataset count must be positive")
    if spec.is_identity_shift():
        warnings.warn("shift parameters are the identity; shifted data equals the natural data", stacklevel=2)
    natural = sample_natural(replace(base_spec, kind="natural", count=spec.count,
                                     seed=spec.seed, shape=spec.shape))
    return shift_transform(natural, spec)


def make_dataset(spec: DatasetSpec, base_spec: DatasetSpec | None = None) -> np.ndarray:
    if spec.kind == "natural":
        return sample_natural(spec)
    return sample_shifted(spec, base_spec or DatasetSpec())


def dataset_fingerprint(data: np.ndarray) -> str:
    return persist.fingerprint_arrays(data)


def task_targets(images: np.ndarray, shape=(16, 16), block: int = 4) -> np.ndarray:
    """Downstream regression target: per-block fraction of pixels above the image median."""
    x = np.asarray(images).reshape(-1, *shape)
    med = np.median(x.reshape(len(x), -1), axis=1)[:, None, None]
    mask = (x > med).astype(np.float64)
    h, w = shape
    blocks = mask.reshape(len(x), h // block, block, w // block, block).mean(axis=(2, 4))
    return blocks.reshape(len(x), -1)


def natural_mean_embedding(model, dataset: np.ndarray, cache_path=None) -> np.ndarray:
    """Mean over the dataset of token-pooled final embeddings.

    With ``cache_path`` the result is stored next to the model and dataset
    fingerprints and reused only when both match.
    """
    dataset = np.asarray(dataset, dtype=np.float64)
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    dfp = dataset_fingerprint(dataset)
    mfp = model.fingerprint
    if cache_path is not None and Path(cache_path).exists():
        try:
            _, meta, tensors = persist.read_artifact(cache_path, kind="mean_embedding")
            if meta.get("dataset") == dfp and meta.get("model") == mfp:
                return tensors["y_tilde"]
        except persist.ArtifactError:
            pass
    pooled = model.pooled(model.embed(dataset)[-1])
    y_tilde = pooled.mean(axis=0)
    if cache_path is not None:
        persist.write_artifact(cache_path, "mean_embedding", {"dataset": dfp, "model": mfp},
                               {"y_tilde": y_tilde})
        # what a later load will see
        y_tilde = y_tilde.astype(np.float32).astype(np.float64)
    return y_tilde


def save_dataset(path, data: np.ndarray, spec: DatasetSpec) -> str:
    meta = {"spec": _spec_to_dict(spec)}
    return persist.write_artifact(path, "dataset", meta, {"data": data}, seed=spec.seed)


def load_dataset(path):
    _, meta, tensors = persist.read_artifact(path, kind="dataset")
    return tensors["data"], _spec_from_dict(meta["spec"])


def _spec_to_dict(spec: DatasetSpec) -> dict:
    d = {k: getattr(spec, k) for k in spec.__dataclass_fields__}
    return {k: (list(map(list, v)) if k == "mix" and v is not None else
                list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def _spec_from_dict(d: dict) -> DatasetSpec:
    d = dict(d)
    for k in ("shape", "scales", "band"):
        if d.get(k) is not None:
            d[k] = tuple(d[k])
    if d.get("mix") is not None:
        d["mix"] = tuple(tuple(r) for r in d["mix"])
    return DatasetSpec(**d)
