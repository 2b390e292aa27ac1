"""Experiment configuration: dataclass sections parsed from a flat INI file.

Parsing is strict: unknown sections or keys, malformed values and a missing
seed are all rejected before any work starts.
"""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field

METHODS = ("ifgsm", "mifgsm", "grat", "umi-grat", "umi+mifgsm")
REPORTS = ("transfer", "cosine", "deviation", "umi")


# samples of the natural set held out while training the foundation encoder
FOUNDATION_HOLDOUT = 200


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    natural_count: int = 2000
    shifted_count: int = 500
    eval_count: int = 100
    umi_count: int = 1000
    holdout_count: int = 500
    shape: tuple = (16, 16)
    gamma: float = 2.2
    band_low: float = 0.6
    band_high: float = 4.0
    band_gain: float = 1.5


@dataclass
class FoundationSection:
    depth: int = 6
    width: int = 64
    embed_dim: int = 64
    act: str = "gelu"
    noise: float = 0.05
    epochs: int = 60
    lr: float = 2e-3


@dataclass
class VictimSection:
    kinds: tuple = ("lowrank:0.1", "finetune:0.1")
    rank: int = 4
    steps: int = 150
    lr: float = 3e-3


@dataclass
class UmiSection:
    rounds: int = 7
    eta: float = 1.0
    inner_steps: int = 5
    lam: float = 0.0  # 0 means calibrate from the data
    lam_fraction: float = 0.25
    phases: int = 4
    holdout: float = 0.2
    init_radius255: float = 1.0


@dataclass
class AttackSection:
    eps255: float = 10.0
    alpha255: float = 2.0
    iters: int = 10
    p: int = 2
    momentum_decay: float = 1.0
    sigma: float = 0.5
    alpha_adp255: float = 4.0
    direction: str = "algorithm-literal"
    start_radius255: float = 1.0
    grat_momentum: bool = True
    methods: tuple = METHODS


@dataclass
class AnalysisSection:
    reports: tuple = REPORTS
    deviation_inputs: int = 5
    reference: str = "ifgsm"


@dataclass
class ExperimentSection:
    seed: int | None = None
    replicates: int = 5
    output: str = "runs/standard"


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    foundation: FoundationSection = field(default_factory=FoundationSection)
    victims: VictimSection = field(default_factory=VictimSection)
    umi: UmiSection = field(default_factory=UmiSection)
    attack: AttackSection = field(default_factory=AttackSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    @property
    def seed(self) -> int:
        return self.experiment.seed

    def seeds(self) -> list:
        return [self.experiment.seed + k for k in range(self.experiment.replicates)]

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _convert(raw: str, kind, default):
    raw = raw.strip()
    if kind is bool or isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if default and isinstance(default[0], int):
            return tuple(int(p) for p in parts)
        return tuple(parts)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, int) or kind in (int, "int | None"):
        return int(raw)
    return raw


def _validate(cfg: ExperimentConfig):
    if cfg.experiment.seed is None:
        raise ConfigError("[experiment] seed is required")
    if cfg.experiment.replicates < 1:
        raise ConfigError("[experiment] replicates must be at least 1")
    bad = [m for m in cfg.attack.methods if m not in METHODS]
    if bad:
        raise ConfigError(f"[attack] unknown methods {bad}; choose from {list(METHODS)}")
    bad = [r for r in cfg.analysis.reports if r not in REPORTS]
    if bad:
        raise ConfigError(f"[analysis] unknown reports {bad}; choose from {list(REPORTS)}")
    if cfg.analysis.reference not in ("ifgsm", "mifgsm"):
        raise ConfigError("[analysis] reference must be ifgsm or mifgsm")
    if cfg.attack.direction not in ("algorithm-literal", "minimize"):
        raise ConfigError("[attack] direction must be algorithm-literal or minimize")
    if cfg.attack.p not in (1, 2):
        raise ConfigError("[attack] p must be 1 or 2")
    for kind in cfg.victims.kinds:
        mode, _, strength = kind.partition(":")
        if mode not in ("lowrank", "finetune", "both"):
            raise ConfigError(f"[victims] unknown victim mode {mode!r}")
        try:
            s = float(strength)
        except ValueError:
            raise ConfigError(f"[victims] bad strength in {kind!r}") from None
        if not 0.0 < s <= 1.0:
            raise ConfigError(f"[victims] strength must lie in (0, 1]: {kind!r}")
    if cfg.data.eval_count < 1 or cfg.data.natural_count < 2:
        raise ConfigError("[data] counts too small")
    if cfg.data.natural_count <= FOUNDATION_HOLDOUT:
        raise ConfigError(f"[data] natural_count must exceed the {FOUNDATION_HOLDOUT} samples held out "
                          "for foundation training")
    if cfg.data.umi_count > cfg.data.natural_count:
        raise ConfigError("[data] umi_count exceeds natural_count")


def parse_config(text: str) -> ExperimentConfig:
    """Parse INI text into an :class:`ExperimentConfig` (strict)."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = ExperimentConfig()
    hints = typing.get_type_hints(ExperimentConfig)
    for name in parser.sections():
        if name not in hints:
            raise ConfigError(f"unknown section [{name}]")
        section = getattr(cfg, name)
        fields = {f.name: f for f in dataclasses.fields(section)}
        for key, raw in parser.items(name):
            if key not in fields:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            f = fields[key]
            try:
                value = _convert(raw, f.type, getattr(section, key) if key != "seed" else 0)
            except ValueError as exc:
                raise ConfigError(f"[{name}] {key}: {exc}") from exc
            setattr(section, key, value)
    _validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def override(cfg: ExperimentConfig, section: str, key: str, value, log=None):
    """Set ``section.key`` to ``value``; a differing previous value is logged."""
    sec = getattr(cfg, section)
    old = getattr(sec, key)
    if old != value and log is not None:
        log(f"flag overrides config: {section}.{key} = {value!r} (config had {old!r})")
    setattr(sec, key, value)
    _validate(cfg)
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """INI text that parses back to ``cfg``."""
    out = []
    for name, sec in cfg.as_dict().items():
        out.append(f"[{name}]")
        for key, value in sec.items():
            if isinstance(value, (tuple, list)):
                value = ", ".join(str(v) for v in value)
            out.append(f"{key} = {value}")
        out.append("")
    return "\n".join(out)
