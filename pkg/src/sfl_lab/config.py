"""
Flat ``key = value`` run configuration.

Lines starting with ``#`` and trailing ``# ...`` comments are ignored. Unknown
keys, unparsable values and out-of-range values raise ``ConfigError`` naming
the key and line.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .cgan import HEADS, LOSS_KINDS
from .trainer import METHODS, TrainerConfig


class ConfigError(ValueError):
    def __init__(self, message, key=None, line=None):
        where = f"line {line}: " if line is not None else ""
        what = f"{key}: " if key is not None else ""
        super().__init__(f"{where}{what}{message}")
        self.key = key
        self.line = line


def _positive(v):
    return v > 0


def _unit_closed(v):
    return 0.0 <= v <= 1.0


def _unit_open_left(v):
    return 0.0 < v <= 1.0


# key -> (type, default, range check, help)
SCHEMA = {
    "method": (str, "sfl", lambda v: v in METHODS, f"one of {', '.join(METHODS)}"),
    "loss": (str, "hinge", lambda v: v in LOSS_KINDS, "hinge or bce"),
    "head": (str, "approx", lambda v: v in HEADS, "conditional head: approx or exact"),
    "batch_size": (int, 128, _positive, "minibatch size B"),
    "epochs": (int, 200, lambda v: v >= 0, "epoch budget E_max"),
    "iters_per_epoch": (int, None, _positive, "iterations per epoch (default: one pass over the train split)"),
    "latent_dim": (int, 2, _positive, "latent dimension"),
    "lr_d": (float, 2e-4, _positive, "discriminator Adam step size"),
    "lr_g": (float, 2e-4, _positive, "generator Adam step size"),
    "d_steps": (int, 1, _positive, "discriminator steps per generator step"),
    "nu": (float, 0.5, _unit_closed, "maximum focusing rate in [0, 1]"),
    "topk_fraction": (float, None, _unit_open_left, "keep top fraction of generated samples in G step"),
    "retention_ratio": (float, None, _unit_open_left, "instance-selection retention ratio"),
    "seed": (int, 0, lambda v: v >= 0, "training seed"),
    "eval_every": (int, 10, _positive, "metric cadence in epochs"),
    "n_eval": (int, 2000, lambda v: v >= 2, "real and generated samples per evaluation"),
    "k": (int, 3, _positive, "neighbour count for precision/recall/density/coverage"),
    "dataset": (str, "default", None, "'default' for the ring benchmark or a dataset CSV path"),
    "data_seed": (int, 0, lambda v: v >= 0, "seed for the synthetic dataset"),
    "classifier_epochs": (int, 10, _positive, "desk classifier training epochs"),
}

TRAINER_KEYS = {f.name for f in fields(TrainerConfig)}


@dataclass
class RunConfig:
    method: str = "sfl"
    loss: str = "hinge"
    head: str = "approx"
    batch_size: int = 128
    epochs: int = 200
    iters_per_epoch: int | None = None
    latent_dim: int = 2
    lr_d: float = 2e-4
    lr_g: float = 2e-4
    d_steps: int = 1
    nu: float = 0.5
    topk_fraction: float | None = None
    retention_ratio: float | None = None
    seed: int = 0
    eval_every: int = 10
    n_eval: int = 2000
    k: int = 3
    dataset: str = "default"
    data_seed: int = 0
    classifier_epochs: int = 10

    def trainer_config(self, **overrides) -> TrainerConfig:
        values = {k: getattr(self, k) for k in TRAINER_KEYS}
        values.update(overrides)
        return TrainerConfig(**values).validate()

    def with_values(self, **changes):
        for key, value in changes.items():
            _check(key, value)
        return replace(self, **changes)


def _convert(key, raw, line):
    typ = SCHEMA[key][0]
    if raw.lower() in ("none", "") and SCHEMA[key][1] is None:
        return None
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"expected {typ.__name__}, got {raw!r}", key, line) from None
    return raw


def _check(key, value, line=None):
    if key not in SCHEMA:
        raise ConfigError("unknown key", key, line)
    check = SCHEMA[key][2]
    if value is not None and check is not None and not check(value):
        raise ConfigError(f"value {value!r} out of range ({SCHEMA[key][3]})", key, line)


def parse_config_text(text, base_dir=None) -> RunConfig:
    values = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw_line.strip()!r}", line=lineno)
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError("unknown key", key, lineno)
        value = _convert(key, raw, lineno)
        _check(key, value, lineno)
        if key == "dataset" and value != "default":
            path = Path(value)
            if not path.is_absolute() and base_dir is not None:
                path = Path(base_dir) / path
            if not path.is_file():
                raise ConfigError(f"dataset file {str(path)!r} does not exist", key, lineno)
            value = str(path)
        values[key] = value
    return RunConfig(**values)


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config_text(text, base_dir=path.parent)


def config_help():
    width = max(map(len, SCHEMA))
    lines = ["config keys (key = value, '#' comments):"]
    for key, (typ, default, _, text) in SCHEMA.items():
        lines.append(f"  {key:<{width}}  {text} [default: {default}]")
    return "\n".join(lines)
