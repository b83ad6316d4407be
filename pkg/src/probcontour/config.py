"""Run configuration: one JSON document validated before any work starts."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .data import SynthConfig
from .encoder import MODES
from .loss import LossConfig
from .trainer import TrainConfig

__all__ = ["ConfigError", "RunConfig", "SCHEMA", "load_run_config"]


class ConfigError(ValueError):
    pass


_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}
_pair = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["seed"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "mode": {"enum": list(MODES)},
        "synth": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "count": _pos_int,
                "image_size": {"type": "array", "items": _pos_int, "minItems": 2, "maxItems": 2},
                "vertex_count": {"type": "integer", "minimum": 3},
                "radius_range": _pair,
                "thickness_range": _pair,
                "harmonic_amplitudes": {"type": "array", "items": {"type": "number", "minimum": 0}, "maxItems": 4},
                "center_shift": {"type": "number", "minimum": 0},
                "background": _num,
                "contrast": _num,
                "noise_std": {"type": "number", "minimum": 0},
                "supersample": _pos_int,
                "spacing": {"type": "number", "exclusiveMinimum": 0},
                "split_fractions": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3, "maxItems": 3},
                "max_retries": _pos_int,
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_components": _pos_int,
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": _pos_int,
                "epochs": {"type": "integer", "minimum": 0},
                "rms_decay": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "rms_epsilon": {"type": "number", "exclusiveMinimum": 0},
                "patience": _pos_int,
                "eval_every": _pos_int,
                "checkpoint_every": {"type": "integer", "minimum": 0},
                "widths": {"type": "array", "items": _pos_int, "minItems": 1},
            },
        },
        "loss": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sigma2": {"type": "number", "exclusiveMinimum": 0},
                "lambda": {"type": "number", "minimum": 0},
                "num_mc_samples": _pos_int,
                "kld_samples": _pos_int,
            },
        },
        "paths": {"type": "object", "additionalProperties": {"type": "string"}},
    },
}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    mode: str
    synth: SynthConfig
    train: TrainConfig
    raw: dict

    @classmethod
    def from_dict(cls, doc: dict, seed_override: int | None = None) -> "RunConfig":
        doc = dict(doc)
        if seed_override is not None:
            doc["seed"] = int(seed_override)
        validator = jsonschema.Draft202012Validator(SCHEMA)
        errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
        if errors:
            e = errors[0]
            raise ConfigError(f"config error at {e.json_path}: {e.message}")
        seed = doc["seed"]
        mode = doc.get("mode", MODES[0])
        synth_kw = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.get("synth", {}).items()}
        train_kw = dict(doc.get("train", {}))
        loss_kw = dict(doc.get("loss", {}))
        if "lambda" in loss_kw:
            loss_kw["lam"] = loss_kw.pop("lambda")
        if "widths" in train_kw:
            train_kw["widths"] = tuple(train_kw["widths"])
        try:
            synth = SynthConfig(seed=seed, **synth_kw)
            batch = train_kw.get("batch_size", 5)
            train = TrainConfig(mode=mode, seed=seed, loss=LossConfig(batch_size=batch, **loss_kw), **train_kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config error: {exc}") from exc
        return cls(seed, mode, synth, train, doc)


def load_run_config(path=None, seed_override: int | None = None) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({"seed": 0 if seed_override is None else seed_override})
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON ({path}:{exc.lineno}): {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config error at $: top level must be an object")
    return RunConfig.from_dict(doc, seed_override)
