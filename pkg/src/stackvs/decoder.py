"""Unrolling the stacked decoder over stages and time.

Stage 1 at step t receives ``(final-stage language hidden at t-1, 0, 0)``;
stage i > 1 receives stage i-1's carry from the same step. Each stage keeps
its own three LSTM states across time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .cell import StageCarry, cell_step, coarse_carry, init_cell_state, precompute_projections
from .errors import NumericError, ShapeError
from .model import BoundModel
from .tensor import Tape, Tensor
from .vocab import BOS, EOS


@dataclass
class AttentionTrace:
    """Attention weights and visual contribution ratio for one rollout.

    ``alpha_v`` is ``(N_s, T, N_v)``, ``alpha_s`` is ``(N_s, T, N_e)`` and
    ``ratio`` is ``(N_s, T)``.
    """

    alpha_v: np.ndarray
    alpha_s: np.ndarray
    ratio: np.ndarray

    @property
    def n_stages(self) -> int:
        return self.alpha_v.shape[0]

    @property
    def n_steps(self) -> int:
        return self.alpha_v.shape[1]

    def rows(self):
        """Yield ``(stage, t, alpha_v, alpha_s, ratio)`` per (stage, step)."""
        for i in range(self.n_stages):
            for t in range(self.n_steps):
                yield i, t, self.alpha_v[i, t], self.alpha_s[i, t], float(self.ratio[i, t])


@dataclass
class Rollout:
    tokens: list[int]
    logits: list[np.ndarray]  # per step: (N_s, d_p)
    log_prob: float
    trace: AttentionTrace


@dataclass
class StepResult:
    logits: list[Tensor]       # per stage, (B, d_p)
    probs: list[Tensor]        # per stage, (B, d_p)
    alpha_v: np.ndarray        # (N_s, B, N_v)
    alpha_s: np.ndarray        # (N_s, B, N_e)
    ratio: np.ndarray          # (N_s, B)
    carries_in: list[StageCarry]
    carries_out: list[StageCarry]


def _as_batch(V0, E0_ids) -> tuple[np.ndarray, np.ndarray, bool]:
    V0 = np.asarray(V0, dtype=np.float64)
    E0_ids = np.asarray(E0_ids)
    single = V0.ndim == 2
    if single:
        V0, E0_ids = V0[None], E0_ids[None]
    if V0.ndim != 3 or E0_ids.ndim != 2 or V0.shape[0] != E0_ids.shape[0]:
        raise ShapeError(f"V0 {V0.shape} and E0 ids {E0_ids.shape} do not form a batch")
    return V0, E0_ids.astype(np.int64), single


class StackRunner:
    """Step-by-step execution of all stages for a batch of images."""

    def __init__(self, model: BoundModel, V0, E0_ids):
        cfg = model.config
        V0, E0_ids, _ = _as_batch(V0, E0_ids)
        if V0.shape[1:] != (cfg.n_v, cfg.d_v):
            raise ShapeError(f"V0 rows are {V0.shape[1:]}, config wants ({cfg.n_v}, {cfg.d_v})")
        if E0_ids.shape[1] != cfg.n_e:
            raise ShapeError(f"got {E0_ids.shape[1]} attribute ids, config wants {cfg.n_e}")
        n_attr = model.attr_embed.shape[0]
        if E0_ids.size and (E0_ids.min() < 0 or E0_ids.max() >= n_attr):
            raise ShapeError(f"attribute id out of range [0, {n_attr})")
        self.model = model
        self.cfg = cfg
        self.batch = V0.shape[0]
        self.V0 = Tensor(V0)
        self.E0 = T.row_select(model.attr_embed, E0_ids)
        self.proj = [precompute_projections(p, self.V0, self.E0) for p in model.stages]
        self.states = [init_cell_state(cfg, self.batch) for _ in model.stages]
        self.h_final = Tensor(np.zeros((self.batch, cfg.d_h)))
        self.t = 0

    def step(self, prev_tokens) -> StepResult:
        prev_tokens = np.asarray(prev_tokens, dtype=np.int64)
        if prev_tokens.shape != (self.batch,):
            raise ShapeError(f"expected {self.batch} previous tokens, got {prev_tokens.shape}")
        if prev_tokens.min() < 0 or prev_tokens.max() >= self.cfg.d_p:
            raise ShapeError(f"token id out of range [0, {self.cfg.d_p})")
        word = T.row_select(self.model.word_embed, prev_tokens)
        carry = coarse_carry(self.cfg, self.h_final)
        logits, probs, av, as_, ratio, c_in, c_out = [], [], [], [], [], [], []
        for i, p in enumerate(self.model.stages):
            c_in.append(carry)
            try:
                out = cell_step(p, self.states[i], word, self.V0, self.E0, carry, *self.proj[i])
                prob = T.softmax(out.logits)
            except NumericError as exc:
                raise NumericError(f"stage {i + 1}, step {self.t}: {exc}") from exc
            self.states[i] = out.state
            carry = out.carry
            c_out.append(carry)
            logits.append(out.logits)
            probs.append(prob)
            av.append(out.alpha_v.value)
            as_.append(out.alpha_s.value)
            ratio.append(out.ratio)
        self.h_final = carry.h_lang
        self.t += 1
        return StepResult(logits, probs, np.stack(av), np.stack(as_), np.stack(ratio), c_in, c_out)

    def reorder(self, rows) -> None:
        """Keep/duplicate batch rows (beam search bookkeeping)."""
        rows = np.asarray(rows, dtype=np.int64)

        def pick(x: Tensor) -> Tensor:
            return T.row_select(x, rows)

        self.V0 = pick(self.V0)
        self.E0 = pick(self.E0)
        self.proj = [(pick(a), pick(b)) for a, b in self.proj]
        for st in self.states:
            for lstm in (st.state_v, st.state_s, st.state_l):
                lstm.h, lstm.c = pick(lstm.h), pick(lstm.c)
        self.h_final = pick(self.h_final)
        self.batch = len(rows)


def _bind(model, tape: Tape | None = None) -> BoundModel:
    return model if isinstance(model, BoundModel) else BoundModel.bind(model, tape)


def sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row by inverse CDF."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < u[:, None] * cdf[:, -1:]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def preference_order(d_p: int) -> np.ndarray:
    """Tie-break order: content ids ascending, then the specials by id."""
    return np.r_[np.arange(4, d_p), np.arange(min(4, d_p))]


def argmax_rows(values: np.ndarray) -> np.ndarray:
    order = preference_order(values.shape[1])
    return order[np.argmax(values[:, order], axis=1)]


@dataclass
class TeacherForced:
    probs: list[list[Tensor]]   # [stage][step] -> (B, d_p)
    logits: list[list[Tensor]]
    targets: np.ndarray         # (B, T) ids, EOS-terminated, padded with 0
    mask: np.ndarray            # (B, T) 1.0 where a target exists
    inputs: np.ndarray          # (B, T) word ids actually fed
    traces: list[AttentionTrace]
    steps: list[StepResult] = field(repr=False, default_factory=list)


def make_targets(gold: Sequence[Sequence[int]], t_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Append <eos> (if room) and pad to the longest sequence."""
    seqs = []
    for g in gold:
        g = [int(x) for x in g]
        if len(g) > t_max:
            raise ShapeError(f"caption of length {len(g)} exceeds t_max={t_max}")
        seqs.append(g + [EOS] if len(g) < t_max else g)
    width = max(len(s) for s in seqs)
    targets = np.zeros((len(seqs), width), dtype=np.int64)
    mask = np.zeros((len(seqs), width))
    for b, s in enumerate(seqs):
        targets[b, :len(s)] = s
        mask[b, :len(s)] = 1.0
    return targets, mask


def _trace_for(steps_av, steps_as, steps_ratio, row: int, n: int) -> AttentionTrace:
    return AttentionTrace(
        np.stack([a[:, row] for a in steps_av[:n]], axis=1),
        np.stack([a[:, row] for a in steps_as[:n]], axis=1),
        np.stack([r[:, row] for r in steps_ratio[:n]], axis=1),
    )


def forward_teacher_forced(
    model,
    V0,
    E0_ids,
    gold,
    ss_prob: float = 0.0,
    rng: np.random.Generator | None = None,
    tape: Tape | None = None,
) -> TeacherForced:
    """Run all stages over a gold caption with scheduled sampling.

    ``gold`` holds content token ids (no <bos>); a single sequence of ints
    is accepted for a single image. At step t the fed word is ``gold[t-1]``
    with probability ``1 - ss_prob``, else a draw from the final stage's
    distribution at t-1; step 0 always feeds <bos>.
    """
    if not 0.0 <= ss_prob <= 1.0:
        raise ValueError(f"ss_prob must lie in [0, 1], got {ss_prob}")
    bound = _bind(model, tape)
    cfg = bound.config
    V0, E0_ids, single = _as_batch(V0, E0_ids)
    if single or (len(gold) and np.ndim(gold[0]) == 0):
        gold = [gold]
    if len(gold) != V0.shape[0]:
        raise ShapeError(f"{len(gold)} captions for {V0.shape[0]} images")
    for g in gold:
        if len(g) and (min(g) < 0 or max(g) >= cfg.d_p):
            raise ShapeError(f"gold token id out of range [0, {cfg.d_p})")
    if ss_prob > 0 and rng is None:
        raise ValueError("scheduled sampling needs an rng")
    targets, mask = make_targets(gold, cfg.t_max)
    batch, width = targets.shape

    runner = StackRunner(bound, V0, E0_ids)
    inputs = np.zeros((batch, width), dtype=np.int64)
    probs = [[] for _ in range(cfg.n_stages)]
    logits = [[] for _ in range(cfg.n_stages)]
    steps: list[StepResult] = []
    prev = np.full(batch, BOS, dtype=np.int64)
    for t in range(width):
        if t > 0:
            prev = targets[:, t - 1].copy()
            if ss_prob > 0:
                swap = rng.random(batch) < ss_prob
                if swap.any():
                    drawn = sample_rows(steps[-1].probs[-1].value, rng)
                    prev[swap] = drawn[swap]
        inputs[:, t] = prev
        res = runner.step(prev)
        steps.append(res)
        for i in range(cfg.n_stages):
            probs[i].append(res.probs[i])
            logits[i].append(res.logits[i])

    lengths = mask.sum(axis=1).astype(int)
    traces = [
        _trace_for([s.alpha_v for s in steps], [s.alpha_s for s in steps],
                   [s.ratio for s in steps], b, lengths[b])
        for b in range(batch)
    ]
    return TeacherForced(probs, logits, targets, mask, inputs, traces, steps)


def _decode_batch(bound: BoundModel, V0, E0_ids, choose: Callable[[np.ndarray], np.ndarray]) -> list[Rollout]:
    """Free-running decode where ``choose`` maps final-stage probs to tokens."""
    cfg = bound.config
    runner = StackRunner(bound, V0, E0_ids)
    batch = runner.batch
    prev = np.full(batch, BOS, dtype=np.int64)
    done = np.zeros(batch, dtype=bool)
    tokens = [[] for _ in range(batch)]
    logits = [[] for _ in range(batch)]
    logp = np.zeros(batch)
    av, as_, ratio = [], [], []
    for _ in range(cfg.t_max):
        res = runner.step(prev)
        final = res.probs[-1].value
        chosen = choose(final)
        stage_logits = np.stack([l.value for l in res.logits], axis=1)  # (B, N_s, d_p)
        av.append(res.alpha_v)
        as_.append(res.alpha_s)
        ratio.append(res.ratio)
        for b in np.flatnonzero(~done):
            tok = int(chosen[b])
            tokens[b].append(tok)
            logits[b].append(stage_logits[b])
            logp[b] += np.log(max(final[b, tok], T.LOG_FLOOR))
            if tok == EOS:
                done[b] = True
        if done.all():
            break
        prev = chosen
    return [
        Rollout(tokens[b], logits[b], float(logp[b]), _trace_for(av, as_, ratio, b, len(tokens[b])))
        for b in range(batch)
    ]


def _unbatch(rollouts: list[Rollout], single: bool):
    return rollouts[0] if single else rollouts


def decode_greedy(model, V0, E0_ids):
    """Argmax of the final stage at every step until <eos> or t_max."""
    bound = _bind(model)
    _, _, single = _as_batch(V0, E0_ids)
    return _unbatch(_decode_batch(bound, V0, E0_ids, argmax_rows), single)


def decode_sample(model, V0, E0_ids, rng: np.random.Generator):
    """Draw each token from the final stage's distribution."""
    bound = _bind(model)
    _, _, single = _as_batch(V0, E0_ids)
    return _unbatch(_decode_batch(bound, V0, E0_ids, lambda p: sample_rows(p, rng)), single)


def replay(model, V0, E0_ids, tokens: Sequence[int]) -> Rollout:
    """Re-run a fixed token sequence for one image (no scheduled sampling)."""
    bound = _bind(model)
    runner = StackRunner(bound, V0, E0_ids)
    prev = BOS
    logits, av, as_, ratio = [], [], [], []
    logp = 0.0
    for tok in tokens:
        res = runner.step([prev])
        logits.append(np.stack([l.value[0] for l in res.logits]))
        logp += float(np.log(max(res.probs[-1].value[0, tok], T.LOG_FLOOR)))
        av.append(res.alpha_v)
        as_.append(res.alpha_s)
        ratio.append(res.ratio)
        prev = tok
    return Rollout(list(tokens), logits, logp, _trace_for(av, as_, ratio, 0, len(tokens)))


def decode_beam(model, V0, E0_ids, beam_width: int) -> Rollout:
    """Beam search over total final-stage log-probability (no length normalization)."""
    if beam_width < 1:
        raise ValueError(f"beam_width must be >= 1, got {beam_width}")
    bound = _bind(model)
    V0, E0_ids, single = _as_batch(V0, E0_ids)
    if not single and V0.shape[0] != 1:
        raise ShapeError("decode_beam takes one image")
    cfg = bound.config
    rank = np.empty(cfg.d_p, dtype=np.int64)
    rank[preference_order(cfg.d_p)] = np.arange(cfg.d_p)

    runner = StackRunner(bound, V0[:1], E0_ids[:1])
    alive: list[tuple[list[int], float]] = [([], 0.0)]
    completed: list[tuple[list[int], float]] = []
    prev = np.array([BOS])
    for t in range(cfg.t_max):
        res = runner.step(prev)
        logp = np.log(np.maximum(res.probs[-1].value, T.LOG_FLOOR))
        cands = []
        for b, (seq, score) in enumerate(alive):
            for v in range(cfg.d_p):
                cands.append((score + logp[b, v], b, int(rank[v]), v))
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        keep_rows, next_alive, next_prev = [], [], []
        for score, b, _, v in cands[:beam_width]:
            seq = alive[b][0] + [v]
            if v == EOS or t == cfg.t_max - 1:
                completed.append((seq, score))
            else:
                keep_rows.append(b)
                next_alive.append((seq, score))
                next_prev.append(v)
        if not next_alive:
            break
        runner.reorder(keep_rows)
        alive = next_alive
        prev = np.array(next_prev)
    # Stable max: earliest-completed wins exact ties.
    best = max(completed, key=lambda c: c[1])
    out = replay(bound, V0[0], E0_ids[0], best[0])
    out.log_prob = float(best[1])
    return out


def rollout_log_prob(model, V0, E0_ids, tokens: Sequence[int]) -> float:
    return replay(model, V0, E0_ids, tokens).log_prob


__all__ = [
    "AttentionTrace",
    "Rollout",
    "StackRunner",
    "StepResult",
    "TeacherForced",
    "decode_beam",
    "decode_greedy",
    "decode_sample",
    "forward_teacher_forced",
    "make_targets",
    "replay",
    "rollout_log_prob",
    "sample_rows",
]
