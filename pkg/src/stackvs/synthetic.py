"""Deterministic toy datasets that a correct model can fit exactly.

Each image owns a set of ``caption_len - 1`` distinct basis patterns. Its
feature rows are those unit patterns plus small noise (remaining rows are
low-norm distractors, and rows are shuffled). The caption is ``"a"`` followed
by the pattern words in ascending pattern index, so it is a function of the
feature set alone. Attribute ids name the image's first patterns, which
makes the semantic branch informative too.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import combinations
from math import comb
from pathlib import Path

import numpy as np

from .data import DatasetRecord, save_dataset
from .errors import ConfigError

WORDS = (
    "dog cat man woman tree car bus bird horse boat train plane girl boy table "
    "chair kite ball cake pizza sign clock bench phone book cup bowl bike road "
    "grass water snow beach field street wall door window bed couch sheep cow "
    "bear zebra giraffe truck"
).split()

PATTERN_NOISE = 0.02
DISTRACTOR_SCALE = 0.05
MAX_PATTERN_COS = 0.9


@dataclass(frozen=True)
class SyntheticSpec:
    n_images: int = 8
    n_v: int = 4
    d_v: int = 8
    n_e: int = 3
    n_attributes: int | None = None  # defaults to one attribute per pattern
    vocab_size: int = 16             # content words, including the leading "a"
    caption_len: int = 5
    n_refs: int = 1

    def __post_init__(self):
        for name in ("n_images", "n_v", "d_v", "n_e", "vocab_size", "caption_len", "n_refs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.caption_len < 2:
            raise ConfigError("caption_len must be at least 2")
        if self.caption_len - 1 > self.n_v:
            raise ConfigError(f"caption_len - 1 = {self.caption_len - 1} patterns do not fit in n_v = {self.n_v} rows")
        if self.n_patterns > len(WORDS):
            raise ConfigError(f"at most {len(WORDS) + 1} content words are available")
        if self.n_patterns < self.caption_len - 1:
            raise ConfigError("vocab_size too small for the caption length")
        if self.n_images > comb(self.n_patterns, self.caption_len - 1):
            raise ConfigError("not enough distinct pattern sets for that many images")
        if self.n_attributes is not None and self.n_attributes < 1:
            raise ConfigError("n_attributes must be positive")

    @property
    def n_patterns(self) -> int:
        return self.vocab_size - 1

    @property
    def attribute_count(self) -> int:
        return self.n_attributes or self.n_patterns


@dataclass
class SyntheticDataset:
    manifest: Path
    records: list[DatasetRecord]
    attributes: list[str]
    basis: np.ndarray          # (n_patterns, d_v)
    pattern_words: list[str]


def _basis(rng: np.random.Generator, k: int, d: int) -> np.ndarray:
    best = None
    for _ in range(1000):
        b = rng.normal(size=(k, d))
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        cos = np.abs(b @ b.T - np.eye(k)).max() if k > 1 else 0.0
        if best is None or cos < best[0]:
            best = (cos, b)
        if cos < MAX_PATTERN_COS:
            break
    return best[1]


def caption_for(patterns, words) -> str:
    return " ".join(["a"] + [words[p] for p in sorted(patterns)])


def generate(spec: SyntheticSpec, seed: int) -> tuple[list[DatasetRecord], list[str], np.ndarray, list[str]]:
    rng = np.random.default_rng(seed)
    k, m = spec.n_patterns, spec.caption_len - 1
    words = list(WORDS[:k])
    basis = _basis(rng, k, spec.d_v)
    n_attr = spec.attribute_count
    attributes = [words[i] if i < k else f"attr{i}" for i in range(n_attr)]

    all_sets = list(combinations(range(k), m))
    chosen = rng.choice(len(all_sets), size=spec.n_images, replace=False)
    records = []
    for idx, set_id in enumerate(sorted(chosen)):
        patterns = list(all_sets[set_id])
        rows = [basis[p] + PATTERN_NOISE * rng.normal(size=spec.d_v) for p in patterns]
        rows += [DISTRACTOR_SCALE * rng.normal(size=spec.d_v) for _ in range(spec.n_v - m)]
        feats = np.stack(rows)[rng.permutation(spec.n_v)].astype(np.float32)
        attr = [patterns[j % m] % n_attr for j in range(spec.n_e)]
        caption = caption_for(patterns, words)
        records.append(DatasetRecord(f"img{idx:05d}", feats, attr, [caption] * spec.n_refs))
    return records, attributes, basis, words


def gen_synthetic(spec: SyntheticSpec, seed: int, out_dir: Path) -> SyntheticDataset:
    """Generate and write a dataset; identical seeds give byte-identical files."""
    records, attributes, basis, words = generate(spec, seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "patterns.json").write_text(
        json.dumps({"words": words, "basis": [[float(x) for x in row] for row in basis]},
                   sort_keys=True) + "\n",
        encoding="utf-8",
    )
    extra = {"synthetic": {"seed": seed, "patterns": "patterns.json",
                           "spec": {k: v for k, v in vars(spec).items()}}}
    manifest = save_dataset(out_dir, records, attributes, spec.n_e, extra)
    return SyntheticDataset(manifest, records, attributes, basis, words)


def recover_caption(features: np.ndarray, basis: np.ndarray, words, threshold: float = 0.5) -> str:
    """Nearest-pattern reading of a feature set (learnability witness)."""
    found = set()
    for row in np.asarray(features, dtype=np.float64):
        if np.linalg.norm(row) < threshold:
            continue
        found.add(int(np.argmax(basis @ row)))
    return caption_for(found, words)
