"""Corpus caption metrics: BLEU-1..4, ROUGE-L and CIDEr.

Inputs are token lists; raw strings are passed through :func:`tokenize`.
CIDEr here is the plain TF-IDF cosine form (no stemming, no length penalty).
"""

from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

Tokens = Sequence[str]
Text = Union[str, Tokens]

_PUNCT = str.maketrans({c: " " for c in string.punctuation})


def tokenize(text: str) -> list[str]:
    """Lowercase, turn ASCII punctuation into spaces, split on whitespace."""
    return text.lower().translate(_PUNCT).split()


def _toks(x: Text) -> list[str]:
    return tokenize(x) if isinstance(x, str) else list(x)


def ngram_counts(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Text], references: Sequence[Sequence[Text]], max_n: int = 4) -> list[float]:
    """Corpus BLEU-1..BLEU-max_n with clipped counts and a corpus brevity penalty.

    The effective reference length per candidate is the closest reference
    length (shorter wins ties). No smoothing: a zero n-gram match zeroes
    every BLEU-k with k >= n.
    """
    if not candidates:
        raise ValueError("bleu needs at least one candidate")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference sets")
    matched = [0] * max_n
    total = [0] * max_n
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        cand = _toks(cand)
        refs = [_toks(r) for r in refs]
        if not refs:
            raise ValueError("every candidate needs at least one reference")
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = ngram_counts(cand, n)
            best: Counter = Counter()
            for r in refs:
                best |= ngram_counts(r, n)
            matched[n - 1] += sum(min(c, best[g]) for g, c in counts.items())
            total[n - 1] += max(len(cand) - n + 1, 0)
    if cand_len == 0:
        return [0.0] * max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    scores = []
    log_sum = 0.0
    for n in range(max_n):
        if matched[n] == 0 or total[n] == 0:
            scores.extend([0.0] * (max_n - n))
            break
        log_sum += math.log(matched[n] / total[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


def lcs_length(a: Tokens, b: Tokens) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Text, references: Sequence[Text], beta: float = 1.2) -> float:
    """Best LCS F-measure over the references."""
    if not references:
        raise ValueError("rouge_l needs at least one reference")
    cand = _toks(candidate)
    if not cand:
        return 0.0
    best = 0.0
    for ref in references:
        ref = _toks(ref)
        lcs = lcs_length(cand, ref)
        if lcs == 0 or not ref:
            continue
        p = lcs / len(cand)
        r = lcs / len(ref)
        f = (1 + beta ** 2) * p * r / (r + beta ** 2 * p)
        best = max(best, f)
    return best


def corpus_rouge_l(candidates: Sequence[Text], references: Sequence[Sequence[Text]], beta: float = 1.2) -> float:
    if not candidates:
        raise ValueError("rouge_l needs at least one candidate")
    return sum(rouge_l(c, r, beta) for c, r in zip(candidates, references)) / len(candidates)


@dataclass(frozen=True)
class IdfTable:
    """Document frequency of every 1..4-gram over images' reference sets."""

    df: Mapping[tuple[str, ...], int]
    n_docs: int
    max_n: int = 4

    def idf(self, gram: tuple[str, ...]) -> float:
        # Unseen n-grams count as present everywhere, i.e. weight 0.
        return math.log(self.n_docs / self.df.get(gram, self.n_docs))


def build_idf(references_by_image: Sequence[Sequence[Text]], max_n: int = 4) -> IdfTable:
    if not references_by_image:
        raise ValueError("build_idf needs at least one image")
    df: Counter = Counter()
    for refs in references_by_image:
        present = set()
        for ref in refs:
            toks = _toks(ref)
            for n in range(1, max_n + 1):
                present.update(ngram_counts(toks, n))
        df.update(present)
    return IdfTable(dict(df), len(references_by_image), max_n)


def _tfidf(tokens: Tokens, n: int, idf: IdfTable) -> tuple[dict, float]:
    vec = {g: c * idf.idf(g) for g, c in ngram_counts(tokens, n).items()}
    return vec, math.sqrt(sum(v * v for v in vec.values()))


def cider_single(candidate: Text, references: Sequence[Text], idf: IdfTable) -> float:
    cand = _toks(candidate)
    refs = [_toks(r) for r in references]
    if not refs:
        raise ValueError("cider needs at least one reference")
    total = 0.0
    for n in range(1, idf.max_n + 1):
        cvec, cnorm = _tfidf(cand, n, idf)
        acc = 0.0
        for ref in refs:
            rvec, rnorm = _tfidf(ref, n, idf)
            if cnorm == 0.0 or rnorm == 0.0:
                continue
            dot = sum(v * rvec.get(g, 0.0) for g, v in cvec.items())
            acc += dot / (cnorm * rnorm)
        total += acc / len(refs)
    return 10.0 * total / idf.max_n


def cider(
    candidates: Sequence[Text], references: Sequence[Sequence[Text]], idf: IdfTable
) -> tuple[float, list[float]]:
    """Mean and per-candidate CIDEr against an IDF table built on the reference corpus."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference sets")
    scores = [cider_single(c, r, idf) for c, r in zip(candidates, references)]
    mean = sum(scores) / len(scores) if scores else 0.0
    return mean, scores


METRIC_NAMES = ("bleu", "rouge_l", "cider")


def evaluate(
    candidates: Sequence[Text],
    references: Sequence[Sequence[Text]],
    metrics: Sequence[str] = METRIC_NAMES,
    beta: float = 1.2,
) -> dict[str, float]:
    """Score a corpus; CIDEr's IDF comes from the given references."""
    unknown = [m for m in metrics if m not in METRIC_NAMES]
    if unknown:
        raise ValueError(f"unknown metric(s): {unknown}")
    cands = [_toks(c) for c in candidates]
    refs = [[_toks(r) for r in rs] for rs in references]
    out: dict[str, float] = {}
    if "bleu" in metrics:
        for n, score in enumerate(bleu(cands, refs), start=1):
            out[f"BLEU-{n}"] = score
    if "rouge_l" in metrics:
        out["ROUGE-L"] = corpus_rouge_l(cands, refs, beta)
    if "cider" in metrics:
        out["CIDEr"] = cider(cands, refs, build_idf(refs))[0]
    return out
