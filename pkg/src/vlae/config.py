"""Experiment configuration: flat dotted keys with defaults.

Config files are plain text, one ``key = value`` per line, ``#`` comments.
Unknown keys are rejected; the resolved config echoes back to the run
directory and re-parses to an identical mapping.
"""

from __future__ import annotations

__all__ = ["ConfigError", "DEFAULTS", "parse_config_text", "parse_value",
           "resolve", "format_config"]


class ConfigError(ValueError):
    pass


DEFAULTS = {
    # dataset
    "data.kind": "synth-shapes",  # synth-shapes | synth-texture | idx | dataset-dir
    "data.path": "",
    "data.height": 12,
    "data.width": 12,
    "data.n": 512,
    "data.copy_prob": 0.9,
    "data.n_shapes": 8,
    "data.noise": 0.05,
    "data.seed": 0,
    "data.binarization": "static",  # static | dynamic | none
    "data.limit": 0,  # 0 = use everything
    # model
    "model.latent_dim": 32,
    "model.decoder": "local-ar",  # factorized | local-ar | grayscale-local-ar | vh-stack | unconditional
    "model.decoder_layers": 6,
    "model.decoder_filters": 12,
    "model.decoder_ksize": 3,
    "model.decoder_tied": False,
    "model.decoder_residual": False,
    "model.cond_channels": 4,
    "model.vh_vertical": 1,
    "model.vh_horizontal": 2,
    "model.flow_steps": 4,
    "model.flow_mode": "mean-only",  # mean-only | affine
    "model.flow_hidden": 64,
    "model.encoder_hidden": 128,
    # objective
    "objective.mode": "none",  # none | hard | soft
    "objective.lam": 0.0,
    "objective.threshold": 0.05,
    "objective.step_factor": 1.1,
    "objective.update_every": 20,
    "objective.gamma": 1.0,
    "objective.debug_equivalence": False,
    # optimizer
    "optimizer.kind": "adamax",  # adamax | adam
    "optimizer.lr": 0.002,
    "optimizer.polyak": 0.998,
    # run
    "run.steps": 100,
    "run.batch": 32,
    "run.seed": 0,
    "run.checkpoint_every": 50,
    "run.k": 128,
    "run.time_budget_s": 0.0,  # 0 = no wallclock cap
}


def parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = parse_value(key, raw)
    return out


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> dict:
    """Defaults <- config file <- CLI overrides, with validation."""
    cfg = dict(DEFAULTS)
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            cfg[key] = parse_value(key, str(value)) if isinstance(value, str) else value
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    if cfg["objective.lam"] < 0:
        raise ConfigError("objective.lam: must be non-negative")
    if not (0.0 < cfg["objective.gamma"] <= 1.0):
        raise ConfigError("objective.gamma: must be in (0, 1]")
    if cfg["objective.mode"] not in ("none", "hard", "soft"):
        raise ConfigError(f"objective.mode: unknown mode {cfg['objective.mode']!r}")
    if cfg["model.decoder"] not in ("factorized", "local-ar", "grayscale-local-ar",
                                    "vh-stack", "unconditional"):
        raise ConfigError(f"model.decoder: unknown kind {cfg['model.decoder']!r}")
    if cfg["model.flow_mode"] not in ("mean-only", "affine"):
        raise ConfigError(f"model.flow_mode: unknown mode {cfg['model.flow_mode']!r}")
    if cfg["optimizer.kind"] not in ("adamax", "adam"):
        raise ConfigError(f"optimizer.kind: unknown kind {cfg['optimizer.kind']!r}")
    if cfg["run.batch"] < 1 or cfg["run.steps"] < 0:
        raise ConfigError("run.batch/run.steps: out of range")
    if cfg["run.k"] < 1:
        raise ConfigError("run.k: must be >= 1")


def format_config(cfg: dict) -> str:
    lines = [f"{key} = {cfg[key]}" for key in sorted(cfg)]
    return "\n".join(lines) + "\n"
