"""LSTM cell and the coupled attention head.

All functions work on row-batched tensors: vectors are ``(B, d)``, feature
sets are ``(B, N, d_f)``. A single example is simply ``B = 1``.

Gate blocks inside an LSTM's stacked weights are ordered
``[input, forget, candidate, output]``; checkpoints depend on that order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


@dataclass
class LstmParams:
    w_in: Tensor    # (4*d_h, d_in)
    w_rec: Tensor   # (4*d_h, d_h)
    bias: Tensor    # (4*d_h,)

    @property
    def hidden_size(self) -> int:
        return self.w_rec.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_in.shape[1]

    def validate(self) -> None:
        rows = self.w_in.shape[0]
        if rows % 4 or self.w_rec.shape != (rows, rows // 4) or self.bias.shape != (rows,):
            raise ShapeError(
                f"inconsistent LSTM shapes: w_in {self.w_in.shape}, "
                f"w_rec {self.w_rec.shape}, bias {self.bias.shape}"
            )


@dataclass
class LstmState:
    h: Tensor
    c: Tensor


@dataclass
class AttentionParams:
    w_score: Tensor  # (1, d_a)
    w_feat: Tensor   # (d_a, d_f)
    w_prev: Tensor   # (d_a, d_f)
    w_hv: Tensor     # (d_a, d_h)
    w_hs: Tensor     # (d_a, d_h)

    def validate(self) -> None:
        d_a = self.w_score.shape[1]
        if (
            self.w_score.shape[0] != 1
            or self.w_feat.shape[0] != d_a
            or self.w_prev.shape != self.w_feat.shape
            or self.w_hv.shape[0] != d_a
            or self.w_hs.shape != self.w_hv.shape
        ):
            raise ShapeError("attention maps do not share d_a / d_f / d_h")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T (+ b)`` for row-vector inputs."""
    out = T.matmul(x, T.transpose(w))
    return out if b is None else T.add(out, b)


def zero_state(batch: int, hidden: int) -> LstmState:
    return LstmState(Tensor(np.zeros((batch, hidden))), Tensor(np.zeros((batch, hidden))))


def lstm_step(p: LstmParams, s: LstmState, x: Tensor) -> LstmState:
    d_h = p.hidden_size
    if x.shape[-1] != p.input_size:
        raise ShapeError(f"LSTM input has size {x.shape[-1]}, expected {p.input_size}")
    if s.h.shape[-1] != d_h or s.c.shape[-1] != d_h:
        raise ShapeError(f"LSTM state size {s.h.shape[-1]} does not match hidden {d_h}")
    z = T.add(T.add(linear(x, p.w_in), linear(s.h, p.w_rec)), p.bias)
    i = T.sigmoid(T.slice_last(z, 0, d_h))
    f = T.sigmoid(T.slice_last(z, d_h, 2 * d_h))
    g = T.tanh(T.slice_last(z, 2 * d_h, 3 * d_h))
    o = T.sigmoid(T.slice_last(z, 3 * d_h, 4 * d_h))
    c = T.add(T.mul(f, s.c), T.mul(i, g))
    h = T.mul(o, T.tanh(c))
    return LstmState(h, c)


def project_features(p: AttentionParams, feats: Tensor) -> Tensor:
    """``W_feat f_k`` for every feature row; constant across time steps."""
    return T.matmul(feats, T.transpose(p.w_feat))


def attention_logits(
    p: AttentionParams,
    feats: Tensor,
    prev_attended: Tensor,
    h_v: Tensor,
    h_s: Tensor,
    feat_proj: Tensor | None = None,
) -> Tensor:
    """Score each of the N features: ``w_a . tanh(W_f f_k + W_p prev + W_hv h_v + W_hs h_s)``.

    ``feats`` is ``(B, N, d_f)``; returns ``(B, N)``.
    """
    if feats.value.ndim != 3:
        raise ShapeError(f"feature set must be (B, N, d_f), got {feats.shape}")
    batch, n, d_f = feats.shape
    if n == 0:
        raise ShapeError("attention over an empty feature set")
    if d_f != p.w_feat.shape[1] or prev_attended.shape[-1] != d_f:
        raise ShapeError(f"feature size {d_f} does not match attention maps {p.w_feat.shape}")
    if feat_proj is None:
        feat_proj = project_features(p, feats)
    query = T.add(
        T.add(linear(prev_attended, p.w_prev), linear(h_v, p.w_hv)),
        linear(h_s, p.w_hs),
    )
    d_a = p.w_score.shape[1]
    hidden = T.tanh(T.add(feat_proj, T.reshape(query, (batch, 1, d_a))))
    scores = T.matmul(hidden, T.transpose(p.w_score))
    return T.reshape(scores, (batch, n))


def attention_weights(logits: Tensor) -> Tensor:
    return T.softmax(logits)


def attend(weights: Tensor, feats: Tensor) -> Tensor:
    """Convex combination ``sum_k alpha_k f_k``; ``(B, N), (B, N, d_f) -> (B, d_f)``."""
    if weights.value.ndim != 2 or feats.value.ndim != 3 or weights.shape != feats.shape[:2]:
        raise ShapeError(f"attend: weights {weights.shape} vs features {feats.shape}")
    batch, n = weights.shape
    out = T.matmul(T.reshape(weights, (batch, 1, n)), feats)
    return T.reshape(out, (batch, feats.shape[2]))
