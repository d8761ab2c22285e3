"""Flat ``key = value`` run configuration shared by every CLI command."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .evaluate import FEATURE_MODES
from .model import ModelConfig
from .train import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    # model
    channels: int = 64
    enc_kernel: int = 3
    dec_kernel: int = 11
    input_channels: int = 1
    # optimisation
    epochs: int = 1
    batch_size: int = 32
    sequence_length: int | None = None
    precision: int = 32
    seed: int = 0
    wta_rule: str = "mask"
    log_every: int = 10
    lr: float = 0.001
    max_updates: int | None = None
    clip_norm: float | None = None
    deterministic: bool = False
    # dataset synthesis
    mode: str = "rotate"
    frames: int = 5
    step: float = 18.0
    window: int = 16
    stride: int = 8
    pad_to: int = 32
    limit: int | None = None
    zca: bool = False
    zca_epsilon: float | None = None
    zca_from: str = ""
    # evaluation
    eval_mode: str = "svm"
    feature_mode: str = "sum-collapse"
    dense_features: bool = False
    svm_reg: float = 0.0001
    svm_epochs: int = 50
    svm_reg_grid: str = ""
    vote_window: int = 5
    dump_features: bool = False
    # paths
    images: str = ""
    labels: str = ""
    train_data: str = ""
    val_data: str = ""
    test_data: str = ""
    checkpoint: str = ""
    out: str = "."

    def __post_init__(self):
        if self.mode not in ("rotate", "scan"):
            raise ConfigError(f"mode must be rotate or scan, got {self.mode!r}")
        if self.eval_mode not in ("svm", "vote"):
            raise ConfigError(f"eval_mode must be svm or vote, got {self.eval_mode!r}")
        if self.feature_mode not in FEATURE_MODES:
            raise ConfigError(f"feature_mode must be one of {FEATURE_MODES}, got {self.feature_mode!r}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        self.reg_grid()
        self.model_config()
        self.train_config()

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.channels, self.enc_kernel, self.dec_kernel, self.input_channels)

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{n: getattr(self, n) for n in names if hasattr(self, n)})

    def reg_grid(self) -> list[float]:
        try:
            return [float(v) for v in self.svm_reg_grid.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"svm_reg_grid must be comma-separated numbers, got {self.svm_reg_grid!r}") from None

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_TYPES = typing.get_type_hints(RunConfig)


def _decode(key: str, text: str):
    kind = _TYPES[key]
    optional = type(None) in typing.get_args(kind)
    if optional:
        kind = next(a for a in typing.get_args(kind) if a is not type(None))
        if text.lower() == "none":
            return None
    if kind is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected true or false, got {text!r}")
    if kind is str:
        return text
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {text!r}") from None


def _encode(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse(text: str, base: RunConfig | None = None) -> RunConfig:
    """Read ``key = value`` lines over ``base`` (defaults when omitted).

    Blank lines and ``#`` comments are skipped; unknown or repeated keys
    are errors.
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: key {key!r} given twice")
        values[key] = _decode(key, value)
    return (base or RunConfig()).replace(**values)


def serialize(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_encode(getattr(cfg, f.name))}\n" for f in fields(cfg))


def load(path) -> RunConfig:
    return parse(Path(path).read_text())


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(serialize(cfg))
