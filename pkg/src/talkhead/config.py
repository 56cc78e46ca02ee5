"""TOML configuration with strict keys, dotted overrides and a stable hash."""
from __future__ import annotations

import copy
import hashlib
import json
import os
import sys
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import DataError, UsageError

ENV_CONFIG = "TALKHEAD_CONFIG"

_STAGE = {"d_model": 128, "heads": 4, "enc_layers": 2, "dec_layers": 2, "ff_dim": 0, "max_T": 1000,
          "align_bias": True, "bias_period": 1, "align_slope": 1.0, "seed": 1}

DEFAULTS: dict[str, Any] = {
    "assets": {"n_v": 128, "n_j": 16, "n_beta": 10, "n_psi": 12, "seed": 0},
    "audio": {"sample_rate": 16000, "fps": 25.0, "kernels": [10, 3, 3, 3, 3, 2, 2],
              "strides": [5, 2, 2, 2, 2, 2, 2], "channels": 64},
    "model": {"stage1": dict(_STAGE), "stage2": dict(_STAGE, seed=2)},
    "train": {"lr": 2e-4, "max_epochs": 100, "patience": 10, "min_delta": 1e-6, "crop_len": 100, "seed": 0,
              "stage2_history_noise": 0.0, "stage2_history_dropout": 0.5, "lam_exp": 1.0, "lam_lmk": 1.0,
              "length_scale": 1000.0},
    "fit": {"w_reproj": 1.0, "w_smooth": 0.1, "w_reg": 1e-3, "iterations": 500, "lr": 1e-2,
            "lr_final": 1e-3, "decay_start": 0.8, "seed": 0},
    "curate": {"laugh_tags": ["laugh", "smile", "happy"], "neutral_tags": ["neutral"], "min_laughter": 3.5,
               "min_prob": 0.5, "contiguous": False, "min_speaker": 0.5, "min_len": 3.5, "train_len": 3.5,
               "test_fraction": 0.1, "seed": 0},
    "eval": {"extractor": "geometric", "split": "test"},
    "export": {"format": "anim-json"},
    "synth": {"n_neutral": 20, "n_laugh": 20, "n_val": 4, "n_test": 4, "duration": 3.5, "jaw_gain": 0.25,
              "smile_gain": 3.0, "beta_std": 0.5, "seed": 0},
}


def _merge(base: dict, new: dict, where: str) -> None:
    for k, v in new.items():
        path = f"{where}.{k}" if where else k
        if k not in base:
            raise DataError(f"config: unknown key {path!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise DataError(f"config: {path!r} must be a table")
            _merge(base[k], v, path)
        else:
            base[k] = _coerce(base[k], v, path)


def _coerce(default, value, path: str):
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
        if isinstance(value, bool):
            return value
        raise DataError(f"config: {path!r} expects true/false, got {value!r}")
    if path.endswith("test_fraction") and isinstance(value, (dict, str)) and not _is_number(value):
        # per-source fractions: a TOML table or "mead:0.15,celeb:0.1"
        items = value.items() if isinstance(value, dict) else (kv.split(":", 1) for kv in value.split(",") if kv)
        try:
            return {str(k).strip(): float(v) for k, v in items}
        except (TypeError, ValueError):
            raise DataError(f"config: {path!r} expects a number or source:fraction pairs, got {value!r}") from None
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v]
            kind = type(default[0]) if default else str
            return [kind(v) for v in value]
    except (TypeError, ValueError):
        raise DataError(f"config: {path!r} expects {type(default).__name__}, got {value!r}") from None
    return value


def _is_number(value) -> bool:
    try:
        float(value)
    except (TypeError, ValueError):
        return False
    return True


def load_config(path: str | None = None, overrides: dict[str, str] | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    path = path or os.environ.get(ENV_CONFIG)
    if path:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except FileNotFoundError:
            raise DataError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as err:
            raise DataError(f"config {path}: {err}") from None
        _merge(cfg, doc, "")
    for key, value in (overrides or {}).items():
        parts = key.split(".")
        node = cfg
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise UsageError(f"unknown config override --{key}")
            node = node[p]
        if parts[-1] not in node or isinstance(node[parts[-1]], dict):
            raise UsageError(f"unknown config override --{key}")
        node[parts[-1]] = _coerce(node[parts[-1]], value, key)
    return cfg


def config_text(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(config_text(cfg).encode("utf-8")).hexdigest()


def dump_toml(cfg: dict) -> str:
    """Minimal TOML writer for the config shape above (tables of scalars and lists)."""
    lines: list[str] = []

    def scalar(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, list):
            return "[" + ", ".join(scalar(x) for x in v) + "]"
        return repr(v)

    def table(prefix, d):
        flat = {k: v for k, v in d.items() if not isinstance(v, dict)}
        if flat:
            lines.append(f"[{prefix}]")
            lines.extend(f"{k} = {scalar(v)}" for k, v in flat.items())
            lines.append("")
        for k, v in d.items():
            if isinstance(v, dict):
                table(f"{prefix}.{k}" if prefix else k, v)

    table("", cfg)
    return "\n".join(lines)
