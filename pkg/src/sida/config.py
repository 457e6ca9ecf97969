"""Run configuration: nested sections, strict keys, canonical hashing.

Config files are TOML. Unknown keys are rejected with the dotted path of the
first offending key; the resolved config serializes to sorted-key JSON, whose
SHA-256 is the config hash stored in checkpoints.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .schedule import ConfigError


@dataclass
class DataConfig:
    preset: str = "ring-8"
    # explicit mixture overrides the preset when weights are given
    weights: Optional[list] = None
    means: Optional[list] = None
    variances: Optional[list] = None
    # grid layout [C, H, W] for conv networks; None means vector data
    shape: Optional[list] = None


@dataclass
class TeacherConfig:
    mode: str = "exact"  # exact | corrupted | learned
    strength: float = 0.0
    seed: int = 1234
    budget: int = 200_000  # learned teacher pretraining samples
    path: Optional[str] = None  # learned teacher checkpoint


@dataclass
class ScheduleConfig:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    t_max: int = 800
    sigma_init: float = 2.5
    kind: str = "edm"
    p_mean: float = -1.2
    p_std: float = 1.2


@dataclass
class NetsConfig:
    generator: str = "mlp"  # mlp | linear
    gen_width: int = 128
    latent_dim: Optional[int] = None  # defaults to the data dimension
    gen_skip: Optional[float] = None  # defaults to 1/sigma_init
    score_width: int = 128
    emb_dim: int = 32
    sigma_data: float = 0.5
    conv_channels: int = 16
    force_norm: str = "off"  # off | in-place | pre-hook
    logvar: Optional[bool] = None  # defaults to on iff force_norm != off
    logvar_form: str = "printed"  # printed | canonical


@dataclass
class LossConfig:
    alpha: float = 1.0
    lambda_sid: float = 100.0
    lambda_adv_gen: float = 0.01
    lambda_adv_fake: float = 1.0
    pool_group: int = 32
    omega_mode: str = "snr"  # snr | adaptive
    disc_from_start: bool = False


@dataclass
class OptimConfig:
    lr_fake: float = 1e-4
    lr_gen: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.999


@dataclass
class TrainSection:
    mode: str = "sida"  # sid | sida | sid2a
    seed: int = 0
    batch_size: int = 64
    n1: int = 10_000
    n2: int = 20_000
    budget: int = 200_000
    fake_steps_per_gen: int = 1
    psi_prefit_steps: int = 1000
    sid_checkpoint: Optional[str] = None
    record_wall_clock: bool = False


@dataclass
class EvalConfig:
    every: int = 10_000  # images between evaluations
    samples: int = 2000  # per trajectory evaluation
    final_samples: int = 10_000
    seed: int = 777
    fisher_sigma: float = 0.5  # noise level for the closed-form divergence


@dataclass
class SweepConfig:
    alphas: list = field(default_factory=list)
    modes: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    threshold: Optional[float] = None
    workers: int = 1


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    nets: NetsConfig = field(default_factory=NetsConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output_dir: Optional[str] = None
    name: Optional[str] = None

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def arch_hash(self) -> str:
        """Hash of everything that fixes parameter shapes and data semantics."""
        d = self.to_dict()
        keep = {
            "data": d["data"],
            "nets": {k: v for k, v in d["nets"].items() if k not in ("force_norm", "logvar", "logvar_form")},
            "sigma_init": d["schedule"]["sigma_init"],
        }
        return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()

    def replace(self, **dotted) -> "TrainConfig":
        """Copy with dotted-key overrides, e.g. replace(**{"train.seed": 3})."""
        d = self.to_dict()
        for key, value in dotted.items():
            _set_dotted(d, key, value)
        return from_dict(d)

    # -- derived values ------------------------------------------------
    @property
    def uses_adversarial(self) -> bool:
        return self.train.mode in ("sida", "sid2a")


def _set_dotted(d: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        if p not in cur or not isinstance(cur[p], dict):
            raise ConfigError(f"unknown config key {key!r}")
        cur = cur[p]
    if parts[-1] not in cur:
        raise ConfigError(f"unknown config key {key!r}")
    cur[parts[-1]] = value


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {prefix.rstrip('.') or '<root>'!r} must be a table")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key {prefix + key!r}")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        v = data[name]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, v, prefix + name + ".")
        else:
            kwargs[name] = v
    return cls(**kwargs)


def from_dict(d: dict) -> TrainConfig:
    cfg = _build(TrainConfig, d, "")
    validate(cfg)
    return cfg


def load(path: str | Path, overrides: dict | None = None) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        if path.suffix == ".json":
            d = json.loads(path.read_text())
        else:
            with open(path, "rb") as fh:
                d = tomllib.load(fh)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    cfg = _build(TrainConfig, d, "")
    if overrides:
        cfg = cfg.replace(**overrides)
    validate(cfg)
    return cfg


def _require(cond: bool, key: str, msg: str):
    if not cond:
        raise ConfigError(f"{key}: {msg}")


def validate(cfg: TrainConfig) -> None:
    t, l, n, o = cfg.train, cfg.loss, cfg.nets, cfg.optim
    _require(t.mode in ("sid", "sida", "sid2a"), "train.mode", f"unknown mode {t.mode!r}")
    _require(t.batch_size >= 1, "train.batch_size", "must be positive")
    _require(0 <= t.n1 < t.n2, "train.n1", "need 0 <= n1 < n2")
    _require(t.budget >= 0, "train.budget", "must be nonnegative")
    _require(t.fake_steps_per_gen >= 1, "train.fake_steps_per_gen", "must be >= 1")
    _require(o.lr_fake > 0, "optim.lr_fake", "must be positive")
    _require(o.lr_gen > 0, "optim.lr_gen", "must be positive")
    _require(0 <= o.ema_decay < 1, "optim.ema_decay", "must lie in [0, 1)")
    _require(cfg.teacher.mode in ("exact", "corrupted", "learned"), "teacher.mode", "unknown mode")
    _require(cfg.teacher.strength >= 0, "teacher.strength", "must be nonnegative")
    _require(n.generator in ("mlp", "linear"), "nets.generator", "must be mlp or linear")
    _require(n.force_norm in ("off", "in-place", "pre-hook"), "nets.force_norm", "unknown mode")
    _require(n.logvar_form in ("printed", "canonical"), "nets.logvar_form", "unknown form")
    _require(l.omega_mode in ("snr", "adaptive"), "loss.omega_mode", "unknown mode")
    _require(l.pool_group >= 1, "loss.pool_group", "must be positive")
    _require(t.batch_size % l.pool_group == 0, "loss.pool_group", "must divide train.batch_size")
    for k in ("lambda_sid", "lambda_adv_gen", "lambda_adv_fake"):
        _require(getattr(l, k) >= 0, f"loss.{k}", "must be nonnegative")
    _require(cfg.eval.every >= 1, "eval.every", "must be positive")
    _require(cfg.eval.samples >= 100, "eval.samples", "must be >= 100")
    _require(cfg.eval.final_samples >= 100, "eval.final_samples", "must be >= 100")
    s = cfg.schedule
    _require(0 < s.sigma_min < s.sigma_max, "schedule.sigma_min", "need 0 < sigma_min < sigma_max")
    _require(s.rho > 0, "schedule.rho", "must be positive")
    if n.force_norm == "in-place" and cfg.uses_adversarial:
        raise ConfigError(
            "nets.force_norm: in-place forced normalization cannot be combined with the "
            "adversarial loss; use 'pre-hook' or 'off'"
        )


def logvar_enabled(cfg: TrainConfig) -> bool:
    if cfg.nets.logvar is None:
        return cfg.nets.force_norm != "off"
    return bool(cfg.nets.logvar)
