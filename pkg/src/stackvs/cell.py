"""One decoder cell: coupled visual/semantic attention LSTMs feeding a language LSTM."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

from . import tensor as T
from .config import StackConfig
from .errors import ShapeError
from .layers import (
    AttentionParams,
    LstmParams,
    LstmState,
    attend,
    attention_logits,
    attention_weights,
    linear,
    lstm_step,
    project_features,
    zero_state,
)
from .tensor import Tensor


@dataclass
class DecoderCellParams:
    lstm_v: LstmParams
    lstm_s: LstmParams
    attn_v: AttentionParams
    attn_s: AttentionParams
    fc_v_w: Tensor   # (d_h, d_v)
    fc_v_b: Tensor   # (d_h,)
    fc_s_w: Tensor   # (d_h, d_e)
    fc_s_b: Tensor   # (d_h,)
    lstm_l: LstmParams
    out_proj: Tensor  # (d_p, d_h)

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, Tensor], prefix: str) -> DecoderCellParams:
        def lstm(name):
            return LstmParams(*(tensors[f"{prefix}{name}.{k}"] for k in ("w_in", "w_rec", "bias")))

        def attn(name):
            keys = ("w_score", "w_feat", "w_prev", "w_hv", "w_hs")
            return AttentionParams(*(tensors[f"{prefix}{name}.{k}"] for k in keys))

        return cls(
            lstm_v=lstm("lstm_v"),
            lstm_s=lstm("lstm_s"),
            attn_v=attn("attn_v"),
            attn_s=attn("attn_s"),
            fc_v_w=tensors[f"{prefix}fc_v.weight"],
            fc_v_b=tensors[f"{prefix}fc_v.bias"],
            fc_s_w=tensors[f"{prefix}fc_s.weight"],
            fc_s_b=tensors[f"{prefix}fc_s.bias"],
            lstm_l=lstm("lstm_l"),
            out_proj=tensors[f"{prefix}out_proj"],
        )


def cell_param_shapes(cfg: StackConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names (relative to a stage prefix) and their shapes."""
    h4 = 4 * cfg.d_h
    shapes: dict[str, tuple[int, ...]] = {}
    for branch in ("lstm_v", "lstm_s"):
        shapes[f"{branch}.w_in"] = (h4, cfg.d_s + cfg.d_h)
        shapes[f"{branch}.w_rec"] = (h4, cfg.d_h)
        shapes[f"{branch}.bias"] = (h4,)
    for branch, d_f in (("attn_v", cfg.d_v), ("attn_s", cfg.d_e)):
        shapes[f"{branch}.w_score"] = (1, cfg.d_a)
        shapes[f"{branch}.w_feat"] = (cfg.d_a, d_f)
        shapes[f"{branch}.w_prev"] = (cfg.d_a, d_f)
        shapes[f"{branch}.w_hv"] = (cfg.d_a, cfg.d_h)
        shapes[f"{branch}.w_hs"] = (cfg.d_a, cfg.d_h)
    shapes["fc_v.weight"] = (cfg.d_h, cfg.d_v)
    shapes["fc_v.bias"] = (cfg.d_h,)
    shapes["fc_s.weight"] = (cfg.d_h, cfg.d_e)
    shapes["fc_s.bias"] = (cfg.d_h,)
    shapes["lstm_l.w_in"] = (h4, cfg.d_h)
    shapes["lstm_l.w_rec"] = (h4, cfg.d_h)
    shapes["lstm_l.bias"] = (h4,)
    shapes["out_proj"] = (cfg.d_p, cfg.d_h)
    return shapes


@dataclass
class DecoderCellState:
    state_v: LstmState
    state_s: LstmState
    state_l: LstmState


@dataclass
class StageCarry:
    """What one stage hands the next at the same time step."""

    h_lang: Tensor  # (B, d_h)
    v_hat: Tensor   # (B, d_v)
    e_hat: Tensor   # (B, d_e)


class CellOutput(NamedTuple):
    state: DecoderCellState
    logits: Tensor     # (B, d_p); softmax is applied by the caller
    alpha_v: Tensor    # (B, N_v)
    alpha_s: Tensor    # (B, N_e)
    carry: StageCarry
    ratio: np.ndarray  # (B,) visual share of the projected attended input


def init_cell_state(cfg: StackConfig, batch: int = 1) -> DecoderCellState:
    return DecoderCellState(
        zero_state(batch, cfg.d_h), zero_state(batch, cfg.d_h), zero_state(batch, cfg.d_h)
    )


def coarse_carry(cfg: StackConfig, h_lang: Tensor) -> StageCarry:
    """Carry into stage 1: previous final-stage language hidden, zero attended vectors."""
    batch = h_lang.shape[0]
    return StageCarry(h_lang, Tensor(np.zeros((batch, cfg.d_v))), Tensor(np.zeros((batch, cfg.d_e))))


def contribution_ratio(fc_v_out: np.ndarray, fc_s_out: np.ndarray) -> np.ndarray:
    """L1 share of the visual projection in the language-LSTM input; 0.5 when both vanish."""
    mv = np.abs(fc_v_out).sum(axis=-1)
    ms = np.abs(fc_s_out).sum(axis=-1)
    total = mv + ms
    return np.where(total > 0, mv / np.where(total > 0, total, 1.0), 0.5)


def cell_step(
    p: DecoderCellParams,
    s: DecoderCellState,
    word_emb: Tensor,
    V0: Tensor,
    E0: Tensor,
    carry_in: StageCarry,
    proj_v: Tensor | None = None,
    proj_s: Tensor | None = None,
) -> CellOutput:
    """Advance one stage by one time step.

    ``word_emb`` is ``(B, d_s)``, ``V0`` is ``(B, N_v, d_v)``, ``E0`` is
    ``(B, N_e, d_e)``. ``proj_v``/``proj_s`` are optional cached
    feature projections (see :func:`project_features`).
    """
    if V0.value.ndim != 3 or E0.value.ndim != 3:
        raise ShapeError(f"V0/E0 must be (B, N, d): got {V0.shape}, {E0.shape}")
    if word_emb.shape[-1] + carry_in.h_lang.shape[-1] != p.lstm_v.input_size:
        raise ShapeError(
            f"word embedding {word_emb.shape} + carry {carry_in.h_lang.shape} "
            f"does not match LSTM input size {p.lstm_v.input_size}"
        )
    x = T.concat([word_emb, carry_in.h_lang])
    state_v = lstm_step(p.lstm_v, s.state_v, x)
    state_s = lstm_step(p.lstm_s, s.state_s, x)
    h_v, h_s = state_v.h, state_s.h

    alpha_v = attention_weights(attention_logits(p.attn_v, V0, carry_in.v_hat, h_v, h_s, proj_v))
    alpha_s = attention_weights(attention_logits(p.attn_s, E0, carry_in.e_hat, h_v, h_s, proj_s))
    v_hat = attend(alpha_v, V0)
    e_hat = attend(alpha_s, E0)

    fc_v = linear(v_hat, p.fc_v_w, p.fc_v_b)
    fc_s = linear(e_hat, p.fc_s_w, p.fc_s_b)
    x_lang = T.add(T.add(fc_v, fc_s), T.add(h_v, h_s))
    state_l = lstm_step(p.lstm_l, s.state_l, x_lang)
    logits = linear(state_l.h, p.out_proj)

    return CellOutput(
        state=DecoderCellState(state_v, state_s, state_l),
        logits=logits,
        alpha_v=alpha_v,
        alpha_s=alpha_s,
        carry=StageCarry(state_l.h, v_hat, e_hat),
        ratio=contribution_ratio(fc_v.value, fc_s.value),
    )


def precompute_projections(p: DecoderCellParams, V0: Tensor, E0: Tensor) -> tuple[Tensor, Tensor]:
    return project_features(p.attn_v, V0), project_features(p.attn_s, E0)
