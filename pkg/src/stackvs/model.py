"""Trainable parameters of the full stack and their binding onto a tape."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cell import DecoderCellParams, cell_param_shapes
from .config import StackConfig
from .errors import ShapeError
from .tensor import Tape, Tensor


def stage_prefix(i: int) -> str:
    return f"stages.{i}."


def param_shapes(cfg: StackConfig, n_attributes: int) -> dict[str, tuple[int, ...]]:
    """Every named parameter in canonical (checkpoint) order."""
    shapes: dict[str, tuple[int, ...]] = {
        "word_embed": (cfg.d_p, cfg.d_s),
        "attr_embed": (n_attributes, cfg.d_e),
    }
    cell = cell_param_shapes(cfg)
    for i in range(cfg.n_stages):
        for name, shape in cell.items():
            shapes[stage_prefix(i) + name] = shape
    return shapes


@dataclass
class ModelParams:
    config: StackConfig
    n_attributes: int
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.config, self.n_attributes)
        if list(expected) != list(self.arrays):
            missing = set(expected) - set(self.arrays)
            extra = set(self.arrays) - set(expected)
            raise ShapeError(f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ShapeError(f"{name} has shape {self.arrays[name].shape}, expected {shape}")

    def copy(self) -> ModelParams:
        return ModelParams(self.config, self.n_attributes, {k: v.copy() for k, v in self.arrays.items()})

    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))


def init_model(cfg: StackConfig, n_attributes: int, seed: int | np.random.Generator = 0) -> ModelParams:
    """Uniform(-r, r) with r = 1/sqrt(fan-in); LSTM forget-gate bias starts at +1."""
    if n_attributes <= 0:
        raise ShapeError("n_attributes must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg, n_attributes).items():
        if name.endswith(".bias"):
            fan_in = cfg.d_h if ".lstm_" in name else (cfg.d_v if ".fc_v" in name else cfg.d_e)
        else:
            fan_in = shape[1]
        r = 1.0 / np.sqrt(fan_in)
        arr = rng.uniform(-r, r, size=shape)
        if ".lstm_" in name and name.endswith(".bias"):
            arr[cfg.d_h:2 * cfg.d_h] += 1.0
        arrays[name] = arr
    return ModelParams(cfg, n_attributes, arrays)


def zero_model(cfg: StackConfig, n_attributes: int) -> ModelParams:
    shapes = param_shapes(cfg, n_attributes)
    return ModelParams(cfg, n_attributes, {k: np.zeros(s) for k, s in shapes.items()})


@dataclass
class BoundModel:
    """Model parameters as tensors, recorded on a tape when one is given."""

    config: StackConfig
    tensors: dict[str, Tensor]
    word_embed: Tensor
    attr_embed: Tensor
    stages: list[DecoderCellParams]

    @classmethod
    def bind(cls, model: ModelParams, tape: Tape | None = None) -> BoundModel:
        if tape is None:
            tensors = {k: Tensor(v) for k, v in model.arrays.items()}
        else:
            tensors = tape.parameters(model.arrays)
        stages = [
            DecoderCellParams.from_tensors(tensors, stage_prefix(i))
            for i in range(model.config.n_stages)
        ]
        return cls(model.config, tensors, tensors["word_embed"], tensors["attr_embed"], stages)
