"""Training: per-stage cross-entropy with Adam, then self-critical policy gradient."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import DatasetRecord
from .decoder import StackRunner, _decode_batch, argmax_rows, forward_teacher_forced, sample_rows
from .errors import ConfigError, NumericError
from .metrics import IdfTable, build_idf, cider_single, tokenize
from .model import BoundModel, ModelParams
from .tensor import Tape, Tensor
from .vocab import BOS, EOS, Vocabulary

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    xe_lr: float = 5e-4
    lr_decay: float = 0.8
    lr_decay_every: int = 3
    ss_increment: float = 0.05
    ss_every: int = 5
    ss_max: float = 0.25
    batch_size: int = 78
    max_epochs: int = 100
    scst_lr: float = 5e-5
    scst_start: int = 30
    grad_clip: float = 10.0
    max_updates: int | None = None
    checkpoint_every: int = 1
    vocab_min_count: int = 5
    seed: int = 0

    def __post_init__(self):
        for name in ("xe_lr", "lr_decay", "scst_lr", "grad_clip"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lr_decay_every", "ss_every", "batch_size", "max_epochs", "checkpoint_every",
                     "vocab_min_count"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.ss_increment < 0:
            raise ConfigError("ss_increment must be >= 0")
        if not 0 <= self.ss_max <= 1:
            raise ConfigError("ss_max must lie in [0, 1]")
        if self.scst_start < 0:
            raise ConfigError("scst_start must be >= 0")
        if self.max_updates is not None and self.max_updates < 1:
            raise ConfigError("max_updates must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> TrainConfig:
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


def lr_schedule(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    if epoch >= cfg.scst_start:
        return cfg.scst_lr
    return cfg.xe_lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


def ss_schedule(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    return min(cfg.ss_increment * (epoch // cfg.ss_every), cfg.ss_max)


# ---------------------------------------------------------------------------
# losses


def xe_loss(stage_dists, gold, mask=None) -> Tensor:
    """Summed negative log-likelihood of ``gold`` under every stage's distributions.

    ``stage_dists[i][k]`` is stage i's distribution at step k, shaped
    ``(d_p,)`` or ``(B, d_p)``; ``gold`` is ``(N_g,)`` or ``(B, N_g)``.
    Stage totals are summed in stage order.
    """
    gold = np.asarray(gold, dtype=np.int64)
    if gold.ndim == 1:
        gold = gold[None, :]
        stage_dists = [[T._as_tensor(d) for d in row] for row in stage_dists]
        stage_dists = [[T.reshape(d, (1, -1)) if d.value.ndim == 1 else d for d in row]
                       for row in stage_dists]
    if mask is None:
        mask = np.ones(gold.shape)
    total = None
    for row in stage_dists:
        if len(row) != gold.shape[1]:
            raise ValueError(f"{len(row)} distributions for {gold.shape[1]} gold tokens")
        stage_total = None
        for k, dist in enumerate(row):
            term = T.nll_gather(dist, gold[:, k], mask[:, k])
            stage_total = term if stage_total is None else T.add(stage_total, term)
        total = stage_total if total is None else T.add(total, stage_total)
    if total is None:
        raise ValueError("xe_loss needs at least one stage")
    return total


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> AdamState:
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})

    def copy(self) -> AdamState:
        return AdamState({k: v.copy() for k, v in self.m.items()},
                         {k: v.copy() for k, v in self.v.items()},
                         self.step, self.beta1, self.beta2, self.eps)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    if not state.m:
        state = AdamState.zeros_like(params)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(new_m, new_v, step, b1, b2, state.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale in place to global L2 norm ``max_norm``; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        factor = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * factor
    return norm


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    features: np.ndarray       # (B, N_v, d_v)
    attribute_ids: np.ndarray  # (B, N_e)
    gold: list[list[int]]
    records: list[DatasetRecord]


def make_batch(records: Sequence[DatasetRecord], vocab: Vocabulary, t_max: int) -> Batch:
    feats = np.stack([np.asarray(r.features, dtype=np.float64) for r in records])
    attrs = np.array([r.attribute_ids for r in records], dtype=np.int64)
    gold = [vocab.encode(tokenize(r.references[0]))[:t_max] for r in records]
    return Batch(feats, attrs, gold, list(records))


def xe_gradients(model: ModelParams, batch: Batch, ss_prob: float, rng) -> tuple[dict, float, float]:
    tape = Tape()
    bound = BoundModel.bind(model, tape)
    tf = forward_teacher_forced(bound, batch.features, batch.attribute_ids, batch.gold, ss_prob, rng)
    total = xe_loss(tf.probs, tf.targets, tf.mask)
    loss = T.scale(total, 1.0 / len(batch.gold))
    grads = T.backward(tape, loss)
    return {k: grads[t] for k, t in bound.tensors.items()}, float(total.value), float(tf.mask.sum())


def evaluate_xe(model: ModelParams, records: Sequence[DatasetRecord], vocab: Vocabulary) -> float:
    """Teacher-forced loss in nats per token per stage (no scheduled sampling)."""
    batch = make_batch(records, vocab, model.config.t_max)
    tf = forward_teacher_forced(model, batch.features, batch.attribute_ids, batch.gold)
    total = float(xe_loss(tf.probs, tf.targets, tf.mask).value)
    return total / (tf.mask.sum() * model.config.n_stages)


# ---------------------------------------------------------------------------
# self-critical sequence training

RewardFn = Callable[[list[int], DatasetRecord], float]


def strip_eos(tokens: Sequence[int]) -> list[int]:
    out = []
    for t in tokens:
        if t == EOS:
            break
        out.append(int(t))
    return out


@dataclass
class CiderReward:
    """CIDEr of a token sequence against the record's references."""

    vocab: Vocabulary
    idf: IdfTable

    @classmethod
    def from_records(cls, vocab: Vocabulary, records: Sequence[DatasetRecord]) -> CiderReward:
        return cls(vocab, build_idf([[tokenize(r) for r in rec.references] for rec in records]))

    def __call__(self, tokens: list[int], record: DatasetRecord) -> float:
        words = self.vocab.decode(tokens)
        return cider_single(words, [tokenize(r) for r in record.references], self.idf)


@dataclass
class RewardSpec:
    """Reward for a sampled caption and the greedy-decode baseline rule."""

    reward: RewardFn

    def baseline(self, greedy_tokens: list[int], record: DatasetRecord) -> float:
        return self.reward(greedy_tokens, record)


@dataclass
class ScstStats:
    mean_reward: float
    mean_baseline: float
    samples: list[list[int]]
    rewards: np.ndarray
    baselines: np.ndarray

    @property
    def advantages(self) -> np.ndarray:
        return self.rewards - self.baselines


def scst_gradients(
    model: ModelParams,
    batch: Batch,
    reward: RewardSpec,
    rng: np.random.Generator,
    samples: list[list[int]] | None = None,
) -> tuple[dict[str, np.ndarray], ScstStats]:
    """Gradient of ``-(r - b) log p(sample) / B`` on the final stage's distribution."""
    cfg = model.config
    B = len(batch.records)
    plain = BoundModel.bind(model)
    greedy = _decode_batch(plain, batch.features, batch.attribute_ids, argmax_rows)

    tape = Tape()
    bound = BoundModel.bind(model, tape)
    runner = StackRunner(bound, batch.features, batch.attribute_ids)
    prev = np.full(B, BOS, dtype=np.int64)
    alive = np.ones(B, dtype=bool)
    drawn: list[list[int]] = [[] for _ in range(B)]
    steps: list[tuple[Tensor, np.ndarray, np.ndarray]] = []
    for t in range(cfg.t_max):
        res = runner.step(prev)
        final = res.probs[-1]
        if samples is None:
            tok = sample_rows(final.value, rng)
        else:
            tok = np.array([s[t] if t < len(s) else EOS for s in samples], dtype=np.int64)
        steps.append((final, tok, alive.astype(np.float64)))
        for b in np.flatnonzero(alive):
            drawn[b].append(int(tok[b]))
            if tok[b] == EOS:
                alive[b] = False
        if not alive.any():
            break
        prev = tok

    rewards = np.array([reward.reward(drawn[b], batch.records[b]) for b in range(B)])
    baselines = np.array([reward.baseline(greedy[b].tokens, batch.records[b]) for b in range(B)])
    adv = rewards - baselines
    loss = None
    for final, tok, live in steps:
        term = T.nll_gather(final, tok, adv * live / B)
        loss = term if loss is None else T.add(loss, term)
    grads = T.backward(tape, loss)
    table = {k: grads[t] for k, t in bound.tensors.items()}
    stats = ScstStats(float(rewards.mean()), float(baselines.mean()), drawn, rewards, baselines)
    return table, stats


def scst_step(
    model: ModelParams,
    records: Sequence[DatasetRecord],
    vocab: Vocabulary,
    reward: RewardSpec,
    rng: np.random.Generator,
    samples: list[list[int]] | None = None,
) -> tuple[dict[str, np.ndarray], ScstStats]:
    """One Monte-Carlo sample per record; greedy decode supplies the baseline.

    ``samples`` pins the sampled token sequences (used for gradient checks).
    """
    if not records:
        raise ValueError("scst_step needs a non-empty batch")
    batch = make_batch(records, vocab, model.config.t_max)
    return scst_gradients(model, batch, reward, rng, samples)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: ModelParams
    adam: AdamState
    log: list[dict]
    updates: int


def _json_line(entry: dict) -> str:
    return json.dumps(entry, sort_keys=True)


def train(
    cfg: TrainConfig,
    records: Sequence[DatasetRecord],
    vocab: Vocabulary,
    model: ModelParams,
    *,
    phase: str = "both",
    start_epoch: int = 0,
    adam: AdamState | None = None,
    out_dir: Path | None = None,
    checkpoint_meta: Mapping | None = None,
) -> TrainResult:
    """XE epochs before ``scst_start``, SCST epochs after; optional checkpoints per epoch.

    ``phase`` limits the run to ``"xe"`` or ``"scst"`` epochs. Each epoch's
    shuffling and sampling use an RNG derived from ``(seed, epoch)``, so a
    resumed run matches an uninterrupted one.
    """
    if phase not in ("xe", "scst", "both"):
        raise ConfigError(f"unknown phase {phase!r}")
    if not records:
        raise ConfigError("training needs at least one record")
    adam = adam if adam is not None else AdamState.zeros_like(model.arrays)
    reward = None
    entries: list[dict] = []
    updates = 0
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "a" if start_epoch else "w", encoding="utf-8")
    try:
        for epoch in range(start_epoch, cfg.max_epochs):
            is_scst = epoch >= cfg.scst_start if phase == "both" else phase == "scst"
            if phase == "xe" and epoch >= cfg.scst_start:
                break
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(len(records))
            lr = cfg.scst_lr if is_scst else lr_schedule(epoch, cfg)
            ss = ss_schedule(epoch, cfg)
            nats = tokens = 0.0
            rsum = bsum = 0.0
            n_rec = 0
            for lo in range(0, len(records), cfg.batch_size):
                if cfg.max_updates is not None and updates >= cfg.max_updates:
                    break
                chunk = [records[i] for i in order[lo:lo + cfg.batch_size]]
                try:
                    if is_scst:
                        if reward is None:
                            reward = RewardSpec(CiderReward.from_records(vocab, records))
                        grads, stats = scst_step(model, chunk, vocab, reward, rng)
                        rsum += stats.rewards.sum()
                        bsum += stats.baselines.sum()
                    else:
                        batch = make_batch(chunk, vocab, model.config.t_max)
                        grads, total, count = xe_gradients(model, batch, ss, rng)
                        nats += total
                        tokens += count
                    n_rec += len(chunk)
                    clip_gradients(grads, cfg.grad_clip)
                    new_arrays, adam = adam_step(model.arrays, grads, adam, lr)
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch}, batch {lo // cfg.batch_size}: {exc}") from exc
                model = ModelParams(model.config, model.n_attributes, new_arrays)
                updates += 1
            entry = {"epoch": epoch, "phase": "scst" if is_scst else "xe", "lr": lr,
                     "ss_prob": 0.0 if is_scst else ss, "updates": updates}
            if is_scst:
                entry["mean_reward"] = rsum / max(n_rec, 1)
                entry["mean_baseline"] = bsum / max(n_rec, 1)
            else:
                entry["xe_loss"] = nats / max(tokens * model.config.n_stages, 1.0)
            entries.append(entry)
            log.info("epoch %d %s", epoch, _json_line(entry))
            if log_fh is not None:
                log_fh.write(_json_line(entry) + "\n")
                log_fh.flush()
                last = epoch + 1 >= cfg.max_epochs or (
                    cfg.max_updates is not None and updates >= cfg.max_updates)
                if epoch % cfg.checkpoint_every == 0 or last:
                    meta = dict(checkpoint_meta or {})
                    meta.update({"epoch": epoch, "updates": updates, "adam_step": adam.step})
                    extra = {f"adam.m.{k}": v for k, v in adam.m.items()}
                    extra.update({f"adam.v.{k}": v for k, v in adam.v.items()})
                    save_checkpoint(model, out_dir / f"epoch_{epoch:04d}.svsc", meta, extra)
            if cfg.max_updates is not None and updates >= cfg.max_updates:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(model, adam, entries, updates)
