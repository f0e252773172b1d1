"""Model dimensions shared by the decoder, trainer, checkpoints and CLI."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .errors import ConfigError


@dataclass(frozen=True)
class StackConfig:
    """Dimensions of a stacked decoder.

    Defaults are the full-scale setting (2048-d region features and attribute
    embeddings, 512 hidden/attention units, 36 regions, 20 attributes).
    """

    n_stages: int = 3
    d_v: int = 2048
    d_e: int = 2048
    d_h: int = 512
    d_a: int = 512
    d_s: int = 512
    d_p: int = 8791
    n_v: int = 36
    n_e: int = 20
    t_max: int = 16

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"{f.name} must be a positive integer, got {value!r}")
        if self.d_p < 4:
            raise ConfigError(f"d_p must be at least 4 (special tokens), got {self.d_p}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> StackConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)
