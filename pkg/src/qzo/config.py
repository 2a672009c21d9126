"""Flat key=value run configuration.

Exactly these keys are recognized (unknown keys are errors): learning_rate,
steps, batch_size, epsilon, clip_threshold, master_seed, lr_schedule, bits,
group_size, model, dataset, quantizer. Blank lines and lines starting with
'#' are ignored. clip_threshold accepts "inf" to disable clipping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .optim import TrainConfig
from .quant import SUPPORTED_BITS


class ConfigError(ValueError):
    """Invalid run configuration (CLI exit code 2)."""


CONFIG_KEYS = (
    "learning_rate",
    "steps",
    "batch_size",
    "epsilon",
    "clip_threshold",
    "master_seed",
    "lr_schedule",
    "bits",
    "group_size",
    "model",
    "dataset",
    "quantizer",
)

QUANTIZERS = ("scalar", "codebook")


@dataclass
class RunSpec:
    """Everything a training run needs: hyperparameters plus model/data wiring."""

    train: TrainConfig = field(default_factory=TrainConfig)
    bits: int = 4
    group_size: int = 128
    model: str = ""
    dataset: str = ""
    quantizer: str = "scalar"

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ConfigError(f"bits must be one of {SUPPORTED_BITS}")
        if self.group_size < 1:
            raise ConfigError("group_size must be >= 1")
        if self.quantizer not in QUANTIZERS:
            raise ConfigError(f"quantizer must be one of {QUANTIZERS}")

    def with_overrides(self, **train_fields) -> "RunSpec":
        return RunSpec(
            train=replace(self.train, **train_fields),
            bits=self.bits,
            group_size=self.group_size,
            model=self.model,
            dataset=self.dataset,
            quantizer=self.quantizer,
        )


def _parse_float(key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: not a number: {raw!r}") from None


def _parse_int(key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key}: not an integer: {raw!r}") from None


def parse_config_text(text: str) -> RunSpec:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = raw

    for required in ("model", "dataset"):
        if required not in values:
            raise ConfigError(f"missing required key {required!r}")

    train_kwargs = {}
    if "learning_rate" in values:
        train_kwargs["learning_rate"] = _parse_float("learning_rate", values["learning_rate"])
    if "steps" in values:
        train_kwargs["steps"] = _parse_int("steps", values["steps"])
    if "batch_size" in values:
        train_kwargs["batch_size"] = _parse_int("batch_size", values["batch_size"])
    if "epsilon" in values:
        train_kwargs["epsilon"] = _parse_float("epsilon", values["epsilon"])
    if "clip_threshold" in values:
        raw = values["clip_threshold"]
        train_kwargs["clip_threshold"] = (
            math.inf if raw.lower() in ("inf", "infinity") else _parse_float("clip_threshold", raw)
        )
    if "master_seed" in values:
        train_kwargs["master_seed"] = _parse_int("master_seed", values["master_seed"])
    if "lr_schedule" in values:
        train_kwargs["lr_schedule"] = values["lr_schedule"]

    try:
        train = TrainConfig(**train_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    return RunSpec(
        train=train,
        bits=_parse_int("bits", values["bits"]) if "bits" in values else 4,
        group_size=_parse_int("group_size", values["group_size"]) if "group_size" in values else 128,
        model=values["model"],
        dataset=values["dataset"],
        quantizer=values.get("quantizer", "scalar"),
    )


def parse_config_file(path) -> RunSpec:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def config_echo(spec: RunSpec) -> dict:
    """The full effective configuration, for the run header."""
    clip = spec.train.clip_threshold
    return {
        "learning_rate": spec.train.learning_rate,
        "steps": spec.train.steps,
        "batch_size": spec.train.batch_size,
        "epsilon": spec.train.epsilon,
        "clip_threshold": "inf" if math.isinf(clip) else clip,
        "master_seed": spec.train.master_seed,
        "lr_schedule": spec.train.lr_schedule,
        "bits": spec.bits,
        "group_size": spec.group_size,
        "model": spec.model,
        "dataset": spec.dataset,
        "quantizer": spec.quantizer,
    }
