"""Flat ``key = value`` configuration files.

One file may carry generator, model and training keys together; each
command reads the keys it needs.  Keys outside the documented set are
rejected.  ``#`` starts a comment.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

from .errors import ConfigError
from .model import HyperParams
from .synthgen import GenConfig
from .trainer import TrainConfig


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(","))


GEN_KEYS = {
    "n_prongs_min": int,
    "n_prongs_max": int,
    "hits_per_prong_mean": float,
    "noise_hit_rate": float,
    "class_mixture": _floats,
    "cross_view_ambiguity": float,
    "p_max": int,
}
MODEL_KEYS = {
    "n": int,
    "m": int,
    "base_dim": int,
    "k_nn": int,
    "base_voxel_size": float,
    "n_classes": int,
    "instance_slots": int,
    "inter_view": _bool,
}
TRAIN_KEYS = {
    "epochs": int,
    "lr": float,
    "lam": float,
    "batch_size": int,
    "seed": int,
    "patience": int,
}
ALL_KEYS = {**GEN_KEYS, **MODEL_KEYS, **TRAIN_KEYS}


def parse_config(text: str) -> dict:
    """Parse config text into a typed dict.  Raises ``ConfigError``."""
    out = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {no}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in ALL_KEYS:
            raise ConfigError(f"config line {no}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"config line {no}: duplicate key {key!r}")
        try:
            out[key] = ALL_KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"config line {no}: bad value for {key}: {exc}") from None
    return out


def load_config(path) -> dict:
    if path is None:
        return {}
    return parse_config(Path(path).read_text(encoding="utf-8"))


def gen_config(cfg: dict, seed: int = 0) -> GenConfig:
    base = GenConfig(seed=seed)
    lo, hi = base.n_prongs_range
    kw = {k: v for k, v in cfg.items() if k in GEN_KEYS and not k.startswith("n_prongs")}
    try:
        return replace(base, n_prongs_range=(cfg.get("n_prongs_min", lo), cfg.get("n_prongs_max", hi)), **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def hyper_params(cfg: dict) -> HyperParams:
    try:
        return HyperParams(**{k: v for k, v in cfg.items() if k in MODEL_KEYS})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(hyper=hyper_params(cfg), **{k: v for k, v in cfg.items() if k in TRAIN_KEYS})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
