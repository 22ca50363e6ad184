"""Flat ``key = value`` run configuration shared by the CLI subcommands."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .layers import MambaConfig, TcnConfig
from .rng import seed_from_env
from .training import TrainConfig


def _dilations(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(d) for d in str(raw).replace(" ", "").split(",") if d)
    except ValueError:
        raise ConfigError(f"dilations must be comma-separated integers, got {raw!r}") from None


@dataclass
class RunConfig:
    feature_dir: str | None = None
    annotation_dir: str | None = None
    out_dir: str = "runs/default"
    official_split: str | None = None
    fold: int = 0
    k_folds: int = 6
    workers: int = 1
    # model
    in_dim: int = 1024
    hidden_dim: int = 256
    tcn_layers: int = 4
    kernel_size: int = 15
    dilations: tuple = (1, 2, 4, 8)
    mamba_layers: int = 4
    state_dim: int = 8
    conv_width: int = 4
    expand: int = 1
    # training
    epochs: int = 50
    lr: float = 3e-4
    warmup_epochs: int = 5
    weight_decay: float = 1e-3
    dropout: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    clip_norm: float = 1.0
    window: int = 300
    stride: int = 200
    seed: int | None = None

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_items(cls, items: dict) -> "RunConfig":
        cfg = cls()
        cfg.update(items)
        return cfg

    def update(self, items: dict):
        known = {f.name: f for f in fields(self)}
        for key, value in items.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(self, key, self._coerce(key, value))

    def _coerce(self, key, value):
        if value is None:
            return None
        if key == "dilations":
            return value if isinstance(value, tuple) else _dilations(value)
        default = getattr(type(self)(), key)
        if key == "seed":
            kind = int
        elif default is None:
            kind = str
        else:
            kind = type(default)
        try:
            return kind(value)
        except (TypeError, ValueError):
            raise ConfigError(f"config key {key!r}: cannot read {value!r} as {kind.__name__}") from None

    @property
    def resolved_seed(self) -> int:
        return seed_from_env() if self.seed is None else self.seed

    def tcn_config(self) -> TcnConfig:
        return TcnConfig(self.in_dim, self.hidden_dim, self.tcn_layers, self.kernel_size, self.dilations, self.dropout)

    def mamba_config(self) -> MambaConfig:
        return MambaConfig(self.hidden_dim, self.mamba_layers, self.state_dim, self.conv_width, self.expand)

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        kwargs = {k: getattr(self, k) for k in names if k != "seed"}
        return TrainConfig(seed=self.resolved_seed, **kwargs)

    def validate(self):
        """Build every derived config once so bad values fail before any work starts."""
        self.tcn_config()
        self.mamba_config()
        self.train_config()
        if self.workers != 1:
            raise ConfigError("only single-worker execution is supported (workers = 1)")
        if not 0 <= self.fold < self.k_folds:
            raise ConfigError(f"fold {self.fold} is outside 0..{self.k_folds - 1}")
        return self

    def to_text(self) -> str:
        lines = []
        for key, value in dataclasses.asdict(self).items():
            if key == "seed":
                value = self.resolved_seed
            if value is None:
                continue
            if key == "dilations":
                value = ",".join(str(d) for d in value)
            lines.append(f"{key} = {value}\n")
        return "".join(lines)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    items = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        items[key.strip()] = value.strip()
    return items


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return RunConfig.from_items(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
