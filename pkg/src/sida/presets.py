"""Shipped run presets.

Names are ``<data>-<teacher>-<mode>`` for the 2-D mixtures, e.g.
``ring-8-corrupted-sida``, plus ``gauss-linear-exact`` for the closed-form
check. sid2a presets still need ``train.sid_checkpoint`` at run time.
"""

from __future__ import annotations

from .config import TrainConfig, from_dict
from .schedule import ConfigError

DATASETS = ("ring-8", "grid-25", "two-moons-gmm")
TEACHERS = ("exact", "corrupted")
MODES = ("sid", "sida", "sid2a")
CORRUPTION = 0.5

# Shared settings for the 2-D mixtures, all laid out on a radius-2 scale.
TOY = {
    "schedule": {"sigma_max": 5.0},
    "nets": {"sigma_data": 1.4, "gen_skip": 1.0},
    # 0.01 x 3072 pixels per CIFAR-10 image, spread over 2 coordinates
    "loss": {"alpha": 1.0, "lambda_adv_gen": 15.36, "lambda_adv_fake": 1.0},
    "optim": {"lr_gen": 1e-3, "lr_fake": 3e-3, "ema_decay": 0.99},
    "train": {"batch_size": 64, "n1": 10_000, "n2": 20_000, "budget": 200_000},
    "eval": {"every": 10_000, "samples": 2000, "final_samples": 10_000},
}

GAUSS_LINEAR = {
    "data": {"preset": "gauss"},
    "teacher": {"mode": "exact"},
    "schedule": {"sigma_max": 5.0},
    "nets": {"generator": "linear", "sigma_data": 0.7},
    "loss": {"alpha": 1.0},
    "optim": {"lr_gen": 1e-3, "lr_fake": 3e-3, "ema_decay": 0.99},
    "train": {"mode": "sid", "batch_size": 64, "n1": 640, "n2": 1280, "budget": 640 + 64 * 2000},
    "eval": {"every": 12_800, "samples": 2000, "final_samples": 4000},
}


def _merge(base: dict, extra: dict) -> dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for k, v in extra.items():
        if isinstance(v, dict):
            out.setdefault(k, {}).update(v)
        else:
            out[k] = v
    return out


def names() -> list[str]:
    out = ["gauss-linear-exact"]
    out += [f"{d}-{t}-{m}" for d in DATASETS for t in TEACHERS for m in MODES]
    return out


def preset_dict(name: str) -> dict:
    if name == "gauss-linear-exact":
        return _merge(GAUSS_LINEAR, {"name": name})
    for d in DATASETS:
        if name.startswith(d + "-"):
            rest = name[len(d) + 1 :].split("-")
            if len(rest) == 2 and rest[0] in TEACHERS and rest[1] in MODES:
                teacher = {"mode": rest[0], "strength": CORRUPTION if rest[0] == "corrupted" else 0.0}
                return _merge(TOY, {"data": {"preset": d}, "teacher": teacher, "train": {"mode": rest[1]}, "name": name})
    raise ConfigError(f"unknown preset {name!r}; known: {', '.join(names())}")


def preset(name: str, /, **overrides) -> TrainConfig:
    cfg = from_dict(preset_dict(name))
    return cfg.replace(**overrides) if overrides else cfg
