"""Flat ``key=value`` run configuration.

One key per line, ``#`` starts a comment. Unknown keys are an error. The
canonical form written by ``save`` lists every key in declaration order, so
loading and re-saving a canonical file reproduces it byte for byte.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigurationError
from .model import DEFAULT_PLAN, ModelConfig, format_plan, parse_plan
from .train import TrainConfig
from .views import ViewCombination, ViewParams


@dataclass
class RunConfig:
    dataset: str = ""
    out: str = "runs/default"
    val_fraction: float = 0.2
    limit_per_class: int = 0
    combo: str = "rgb+gm"
    sigma: float = 1.0
    d: int = 1
    view_mode: str = "paper-literal"
    input_h: int = 256
    input_w: int = 256
    conv_plan: str = format_plan(DEFAULT_PLAN)
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    dropout_rate: float = 0.2
    seed: int = 0
    checkpoint_every: int = 0
    class_weighting: bool = False
    in_memory: bool = True
    threads: int = 0

    def __post_init__(self):
        self.combo = ViewCombination.parse(self.combo).value
        parse_plan(self.conv_plan)
        self.view_params()

    # --- derived configs ---

    @property
    def input_size(self) -> tuple[int, int]:
        return (self.input_h, self.input_w)

    @property
    def view_combination(self) -> ViewCombination:
        return ViewCombination.parse(self.combo)

    def view_params(self) -> ViewParams:
        return ViewParams(self.sigma, self.d, self.view_mode)

    def model_config(self, class_count: int) -> ModelConfig:
        return ModelConfig(
            self.view_combination, self.input_size, class_count, self.dropout_rate, parse_plan(self.conv_plan)
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            dropout_rate=self.dropout_rate,
            seed=self.seed,
            view_combination=self.view_combination,
            checkpoint_every=self.checkpoint_every,
            class_weighting=self.class_weighting,
        )

    # --- (de)serialization ---

    def with_updates(self, **updates) -> "RunConfig":
        return load_pairs(updates, base=self)

    def dumps(self) -> str:
        return "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self))

    def save(self, path: "str | Path") -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(key: str, raw) -> object:
    kind = _TYPES[key]
    if not isinstance(raw, str):
        raw = _format(raw)
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None
    return raw


def load_pairs(pairs: dict, base: Optional[RunConfig] = None) -> RunConfig:
    unknown = sorted(set(pairs) - set(_TYPES))
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
    values = dataclasses.asdict(base) if base is not None else {}
    values.update({k: _convert(k, v) for k, v in pairs.items()})
    return RunConfig(**values)


def loads(text: str) -> RunConfig:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in pairs:
            raise ConfigurationError(f"config line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return load_pairs(pairs)


def load(path: "str | Path") -> RunConfig:
    return loads(Path(path).read_text())
