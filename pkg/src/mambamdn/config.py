"""Flat ``key=value`` model/training configuration."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .autodiff import ConfigError

__all__ = ["ModelConfig", "VARIANTS", "parse_overrides", "default_seed"]

VARIANTS = (
    "MIX_MINUS_REF",
    "TARUS_MINUS_REF",
    "MIX_MINUS_TARUS",
    "MIX_MINUS_ZERO",
    "PARALLEL_T",
    "SINGLE_BLOCK",
    "FUSION",
)


def default_seed(fallback: int = 0) -> int:
    """``MDN_SEED`` from the environment when set, else ``fallback``."""
    value = os.environ.get("MDN_SEED")
    return int(value) if value not in (None, "") else fallback


@dataclass
class ModelConfig:
    c: int = 32
    T: int = 6
    state_dim: int = 8
    depth: int = 2
    kernel: int = 3
    lr: float = 1e-4
    batch: int = 2
    epochs: int = 1
    max_steps: int = 0
    seed: int = 0
    variant: str = "MIX_MINUS_REF"
    dc_mode: str = "final"
    merge: str = "sum"
    accel: float = 4.0
    center_fraction: float = 0.08
    mask_seed: int = 1000
    noise_sigma: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.c < 1 or self.T < 1 or self.state_dim < 1 or self.depth < 0:
            raise ConfigError("c, T and state_dim must be >= 1 and depth >= 0")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch < 1 or self.epochs < 0 or self.max_steps < 0:
            raise ConfigError("batch >= 1, epochs >= 0 and max_steps >= 0 required")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.dc_mode not in ("final", "every"):
            raise ConfigError(f"dc_mode must be 'final' or 'every', got {self.dc_mode!r}")
        if self.merge not in ("sum", "mean"):
            raise ConfigError(f"merge must be 'sum' or 'mean', got {self.merge!r}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> ModelConfig:
        """Build from string values, rejecting unknown keys."""
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, raw in values.items():
            kind = known[key].type
            try:
                if kind in ("int", int):
                    kwargs[key] = int(float(raw)) if isinstance(raw, str) else int(raw)
                elif kind in ("float", float):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = str(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return cls(**kwargs)

    def to_text(self) -> str:
        return "".join(f"{k}={getattr(self, k)!r}\n".replace("'", "") for k in self.keys())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path, overrides: dict[str, str] | None = None) -> ModelConfig:
        values = read_key_values(path)
        values.update(overrides or {})
        return cls.from_dict(values)


def read_key_values(path: str | Path) -> dict[str, str]:
    values = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def parse_overrides(items: list[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, _, value = item.partition("=")
        out[key.strip()] = value.strip()
    return out
