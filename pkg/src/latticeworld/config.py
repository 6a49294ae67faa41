"""Run configuration: typed per-subcommand keys, ``key = value`` files and flag overrides."""

from __future__ import annotations

from pathlib import Path

from .errors import DataError


class UsageError(Exception):
    """Bad command line or configuration (exit code 2)."""


COMMON = {"seed": 0, "threads": 1, "out_dir": "."}

_SAMPLER = {"steps": 10, "window_size": 16, "stride": 0, "kernel_sigma": 0.0, "sigma_max": -1.0, "chunk": 4}

_FLOW = {"lattice": 16, "crop": 32, "per_scene": 6, "train_steps": 2000, "lr": 0.05, "batch": 4,
         "sub_crop": 8, "hidden": 32, "patch_radius": 4, "embed_dim": 8, "stages": "S,L"}

SCHEMAS = {
    "gen-data": {"families": "hills,towers,plains", "count": 12, "scene_size": 64},
    "train": {"data": "", **_FLOW},
    "finetune-decoder": {"data": "", "decoders": "", "lattice": 16, "crop": 32, "per_scene": 4,
                         "train_steps": 500, "lr": 0.2},
    "finetune-enhancer": {"data": "", "model_l": "", "lattice": 16, "per_scene": 4, "min_content": 8,
                          "train_steps": 600, "lr": 0.1, "batch": 2},
    "sample": {"map": "", "prompts": "", "dims": "16,48,48", "model_s": "", "model_l": "", "decoders": "",
               "sampler": "fused", **_SAMPLER},
    "optimize-init": {"model_s": "", "decoders": "", "dims": "16,32,32", "prompt": "hills",
                      "ground_height": 2, "exclude_from": 5, "opt_lr": 9.0, "max_steps": 10,
                      "parameterization": "spectral", "optimizer": "adam", "dice_threshold": 0.9,
                      **_SAMPLER},
    "enhance": {"world": "", "model_l": "", "fusion": "", "levels": 1, "tile": 16, "steps": 10,
                "prompt": "hills", "map": "", "prompts": ""},
    "eval": {"world": "", "occ": "", "map": "", "prompts": "", "model_s": "", "decoders": "",
             "statistic": "column_fill", **_SAMPLER},
    "render": {"occ": "", "latent": "", "decoders": "", "map": "", "size": ""},
}

REQUIRED = {
    "train": ("data",),
    "finetune-decoder": ("data",),
    "finetune-enhancer": ("data", "model_l"),
    "sample": ("map", "prompts", "model_s", "model_l"),
    "optimize-init": ("model_s",),
    "enhance": ("world", "model_l", "fusion"),
    "eval": ("world",),
    "render": ("occ",),
}


def schema(command: str) -> dict:
    return {**COMMON, **SCHEMAS[command]}


def _convert(key, raw, default):
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"config key {key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def read_config_file(path, command: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e.strerror}") from None
    keys = schema(command)
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise UsageError(f"config {path}:{n}: expected 'key = value'")
        if key not in keys:
            raise UsageError(f"config {path}:{n}: unknown key {key!r} for {command}")
        out[key] = _convert(key, val.strip(), keys[key])
    return out


def resolve(command: str, file_values: dict, overrides: dict) -> dict:
    """Defaults, then the config file, then command-line flags."""
    cfg = dict(schema(command))
    cfg.update(file_values)
    for k, v in overrides.items():
        if v is not None:
            cfg[k] = _convert(k, v, cfg[k]) if isinstance(v, str) else v
    missing = [k for k in REQUIRED.get(command, ()) if not cfg[k]]
    if missing:
        raise UsageError(f"{command}: missing required setting(s): {', '.join(missing)}")
    if cfg["threads"] < 1:
        raise UsageError("threads must be >= 1")
    return cfg


def format_config(cfg: dict) -> list[str]:
    return [f"{k} = {cfg[k]}" for k in sorted(cfg)]


def parse_dims(text: str) -> tuple[int, int, int]:
    try:
        vals = [int(v) for v in str(text).replace("x", ",").split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse dims {text!r}") from None
    if len(vals) == 1:
        vals *= 3
    if len(vals) != 3 or min(vals) < 1:
        raise UsageError(f"dims must be 'd,h,w' or a single size, got {text!r}")
    return tuple(vals)
