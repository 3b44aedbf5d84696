"""Run configuration: built-in defaults, ``key = value`` files, flag overrides.

Config file grammar (UTF-8)::

    # comment                 whole-line comment
    key = value               one pair per line; key may use '-' or '_'
    key = value   # note      trailing comment after whitespace

Unknown keys are rejected. Precedence is flag > file > default.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .model import ArchitectureConfig
from .optim import TrainConfig


@dataclass
class RunConfig:
    seed: int = 42
    # data
    label_column: str = "Label"
    normal_label: str = "NORMAL"
    dataset: str = "none"  # identifier drop-list preset: dnp3, iec104, none
    drop_columns: str = ""  # extra comma-separated columns to drop
    split_ratio: float = 0.7
    fit_scope: str = "train_only"
    threshold: float = 0.5
    # architecture
    conv_filters: str = "64,64,64"
    kernel_size: str = "3,3,3"
    pool: int = 2
    lstm_units: str = "64,128"
    dense_units: int = 128
    dropout: float = 0.4
    # training
    learning_rate: float = 0.001
    epochs: int = 150
    batch_size: int = 16
    patience: int = 10
    restore_best: bool = True
    validation_source: str = "carve"
    validation_fraction: float = 0.1
    pos_weight: float = 1.0
    folds: int = 5

    def architecture(self, input_features: int) -> ArchitectureConfig:
        filters = _int_list(self.conv_filters, "conv_filters")
        kernels = _int_list(self.kernel_size, "kernel_size")
        if len(kernels) == 1:
            kernels = kernels * len(filters)
        if len(kernels) != len(filters):
            raise ConfigError("conv_filters and kernel_size list different numbers of blocks")
        return ArchitectureConfig(input_features, tuple(zip(filters, kernels)), self.pool,
                                  tuple(_int_list(self.lstm_units, "lstm_units")), self.dense_units,
                                  self.dropout)

    def training(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, max_epochs=self.epochs,
                           batch_size=self.batch_size, patience=self.patience,
                           restore_best=self.restore_best, validation_source=self.validation_source,
                           validation_fraction=self.validation_fraction, shuffle_seed=self.seed,
                           pos_weight=self.pos_weight)

    def drop_list(self) -> list[str]:
        from .data import DEFAULT_DROP

        if self.dataset not in DEFAULT_DROP:
            raise ConfigError(f"unknown dataset preset {self.dataset!r} (choose from {sorted(DEFAULT_DROP)})")
        extra = [c.strip() for c in self.drop_columns.split(",") if c.strip()]
        return list(DEFAULT_DROP[self.dataset]) + extra

    def validate(self) -> None:
        """Fail fast, before any data is read."""
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError(f"split_ratio must be in (0, 1), got {self.split_ratio}")
        if self.fit_scope not in ("train_only", "whole_dataset"):
            raise ConfigError(f"fit_scope must be train_only or whole_dataset, got {self.fit_scope!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must be in [0, 1], got {self.threshold}")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        self.drop_list()
        self.training().validate()
        # length-independent architecture checks; the shape chain is checked once F is known
        arch = self.architecture(10 ** 6)
        arch.validate()

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _int_list(text: str, key: str) -> list[int]:
    try:
        values = [int(v) for v in str(text).replace("x", ",").split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated list of integers, got {text!r}") from None
    if not values:
        raise ConfigError(f"{key} is empty")
    return values


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, value: Any) -> Any:
    kind = type(getattr(RunConfig, key))
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    text = str(value).strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind.__name__}") from None


def normalize_key(key: str) -> str:
    return key.strip().lower().replace("-", "_")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        for marker in (" #", "\t#"):
            if marker in value:
                value = value.split(marker, 1)[0]
        key = normalize_key(key)
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value.strip())
    return values


def load_config_file(path: str | Path) -> dict[str, Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def build_run_config(file_values: dict[str, Any] | None = None,
                     flag_values: dict[str, Any] | None = None) -> RunConfig:
    """Merge defaults, then file values, then flags that were actually given."""
    merged: dict[str, Any] = {}
    merged.update(file_values or {})
    for key, value in (flag_values or {}).items():
        if value is not None:
            merged[normalize_key(key)] = value
    unknown = set(merged) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown settings {sorted(unknown)}")
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in merged.items()})
    cfg.validate()
    return cfg
