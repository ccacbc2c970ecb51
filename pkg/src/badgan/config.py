"""Sectioned key=value config files for TrainConfig."""

from __future__ import annotations

import configparser
import io
from dataclasses import fields
from pathlib import Path

from badgan.objectives import ConfigurationError
from badgan.trainer import TrainConfig

SECTIONS = {
    "data": ("dataset", "n_per_class", "noise_sigma", "n_labeled_per_class", "test_fraction", "data_seed"),
    "model": ("d_f", "d_z", "hidden", "disc_layers", "theta", "leaky_slope"),
    "objective": (
        "w_fm", "w_ent_gen", "w_ld", "w_cond_ent", "cond_ent_from", "entropy_method", "q_centile",
        "generator_mode", "oracle_radius_factor",
    ),
    "optim": ("lr", "lr_decay_from", "beta1", "beta2", "batch_size", "d_steps", "steps", "eval_interval", "seed"),
}

# sections a manifest adds on top of a config; skipped when parsing
IGNORED_SECTIONS = ("artifacts",)

_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_SECTION_OF = {key: sec for sec, keys in SECTIONS.items() for key in keys}


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{key}: cannot parse {raw!r}") from exc
    return raw


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, **overrides) -> TrainConfig:
    """Parse config text; unknown sections or keys are errors."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc
    values: dict = {}
    for sec in cp.sections():
        if sec in IGNORED_SECTIONS:
            continue
        if sec not in SECTIONS:
            raise ConfigurationError(f"unknown section [{sec}]")
        for key, raw in cp.items(sec):
            if _SECTION_OF.get(key) != sec:
                raise ConfigurationError(f"unknown key {key!r} in [{sec}]")
            values[key] = _convert(key, raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def load_config(path: str | Path, **overrides) -> TrainConfig:
    return parse_config(Path(path).read_text(), **overrides)


def serialize_config(config: TrainConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    for sec, keys in SECTIONS.items():
        cp[sec] = {k: _format(getattr(config, k)) for k in keys}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def save_config(config: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(serialize_config(config))


# named starting points for the toy experiments
PRESETS: dict[str, dict] = {
    "spins-oracle": dict(
        dataset="spins", generator_mode="oracle_complement", w_cond_ent=0.0,
        disc_layers=5, hidden=128, lr=3e-3, steps=36000, lr_decay_from=0.5,
        eval_interval=6000,
    ),
    "spins-fm": dict(dataset="spins", w_ld=0.0, w_cond_ent=0.0, w_ent_gen=0.0),
    "spins-fm-ld": dict(dataset="spins", w_ld=20.0, w_cond_ent=0.0, w_ent_gen=0.0, q_centile=10.0),
    "circles-fm": dict(
        dataset="circles", d_f=2, w_ld=0.0, w_ent_gen=1.0, entropy_method="pt",
        w_cond_ent=1.0, cond_ent_from=0.5, disc_layers=3, d_steps=3,
        steps=12000, lr_decay_from=0.5, eval_interval=1000,
    ),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides})
