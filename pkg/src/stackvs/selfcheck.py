"""Finite-difference gradient suite and metric oracles.

Each op check draws random tiny shapes, builds a scalar loss that contracts
the op output with a random weight tensor, and compares tape gradients with
central differences.
"""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .cell import DecoderCellParams, DecoderCellState, StageCarry, cell_param_shapes, cell_step
from .config import StackConfig
from .layers import AttentionParams, LstmParams, LstmState, attend, attention_logits, attention_weights, lstm_step
from .metrics import bleu, build_idf, cider, rouge_l
from .tensor import Tensor, grad_check

TOLERANCE = 1e-4
EPS = 1e-5


# Central differences at eps=1e-5 resolve a derivative only to ~1e-11 in
# absolute terms, so a coordinate whose true gradient is accidentally ~1e-8
# cannot be judged at 1e-4 relative error. Such draws are redrawn.
RESOLVABLE = 1e-6
MAX_REDRAWS = 50


@dataclass
class CheckResult:
    name: str
    error: float
    passed: bool
    trials: int = 1
    redraws: int = 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.redraws} redrawn)" if self.redraws else ""
        return f"{status} {self.name}: max error {self.error:.3e} over {self.trials} trial(s){extra}"


def _contract(out: Tensor, weight: np.ndarray) -> Tensor:
    return T.sum(T.mul(out, Tensor(weight)))


Problem = tuple[Callable[[dict], Tensor], dict[str, np.ndarray]]


def _dims(rng, lo=1, hi=4, n=1):
    return [int(rng.integers(lo, hi + 1)) for _ in range(n)]


def op_problem(op: str, rng: np.random.Generator) -> Problem:
    """A random loss exercising ``op`` and its parameter arrays."""
    m, k, n = _dims(rng, n=3)
    if op == "matmul":
        R = rng.normal(size=(m, n))
        return (lambda p: _contract(T.matmul(p["a"], p["b"]), R),
                {"a": rng.normal(size=(m, k)), "b": rng.normal(size=(k, n))})
    if op == "matmul_batched":
        R = rng.normal(size=(2, m, n))
        return (lambda p: _contract(T.matmul(p["a"], p["b"]), R),
                {"a": rng.normal(size=(2, m, k)), "b": rng.normal(size=(k, n))})
    if op in ("add", "mul"):
        fn = T.add if op == "add" else T.mul
        R = rng.normal(size=(m, n))
        return (lambda p: _contract(fn(p["a"], p["b"]), R),
                {"a": rng.normal(size=(m, n)), "b": rng.normal(size=(n,))})
    if op in ("tanh", "sigmoid", "softmax"):
        fn = getattr(T, op)
        R = rng.normal(size=(m, n))
        return lambda p: _contract(fn(p["x"]), R), {"x": rng.normal(size=(m, n))}
    if op == "scale":
        c = float(rng.normal())
        R = rng.normal(size=(m, n))
        return lambda p: _contract(T.scale(p["x"], c), R), {"x": rng.normal(size=(m, n))}
    if op == "sum":
        return lambda p: T.scale(T.sum(p["x"]), 1.7), {"x": rng.normal(size=(m, n))}
    if op == "log":
        R = rng.normal(size=(m, n))
        return lambda p: _contract(T.log(p["x"]), R), {"x": rng.uniform(0.5, 2.0, size=(m, n))}
    if op == "concat":
        R = rng.normal(size=(m, k + n))
        return (lambda p: _contract(T.concat([p["a"], p["b"]]), R),
                {"a": rng.normal(size=(m, k)), "b": rng.normal(size=(m, n))})
    if op == "row_select":
        ids = rng.integers(0, m, size=(k, 2))
        R = rng.normal(size=(k, 2, n))
        return lambda p: _contract(T.row_select(p["w"], ids), R), {"w": rng.normal(size=(m, n))}
    if op == "reshape":
        R = rng.normal(size=(n, m))
        return lambda p: _contract(T.reshape(p["x"], (n, m)), R), {"x": rng.normal(size=(m, n))}
    if op == "transpose":
        R = rng.normal(size=(n, m))
        return lambda p: _contract(T.transpose(p["x"]), R), {"x": rng.normal(size=(m, n))}
    if op == "slice":
        width = n + 2
        R = rng.normal(size=(m, n))
        return (lambda p: _contract(T.slice_last(p["x"], 1, 1 + n), R),
                {"x": rng.normal(size=(m, width))})
    if op == "nll_gather":
        v = n + 1
        tgt = rng.integers(0, v, size=m)
        w = rng.uniform(0.5, 1.5, size=m)
        return (lambda p: T.nll_gather(T.softmax(p["x"]), tgt, w),
                {"x": rng.normal(size=(m, v))})
    raise KeyError(op)


OPS = (
    "matmul", "matmul_batched", "add", "mul", "tanh", "sigmoid", "softmax", "concat",
    "row_select", "scale", "sum", "log", "nll_gather", "reshape", "transpose", "slice",
)


def random_config(rng: np.random.Generator) -> StackConfig:
    d_v, d_e, d_h, d_a, d_s = _dims(rng, 1, 3, 5)
    return StackConfig(n_stages=1, d_v=d_v, d_e=d_e, d_h=d_h, d_a=d_a, d_s=d_s,
                       d_p=int(rng.integers(4, 7)), n_v=int(rng.integers(1, 4)),
                       n_e=int(rng.integers(1, 4)), t_max=4)


def cell_problem(rng: np.random.Generator, cfg: StackConfig | None = None) -> Problem:
    """Loss over every output of one cell step; all params and inputs are free.

    The attention query is shared by all positions and softmax ignores a
    common shift, so query-side weights only matter through the curvature
    of tanh across positions. With small pre-activations those gradients
    drop to ~1e-7, below what central differences resolve at eps=1e-5, so
    the feature maps and features are drawn wide enough to spread them.
    """
    cfg = cfg or random_config(rng)

    def away(size, lo=0.3, hi=1.0):
        # magnitudes bounded away from zero so no coordinate's gradient
        # vanishes by accident of a near-zero input
        return rng.choice([-1.0, 1.0], size=size) * rng.uniform(lo, hi, size=size)

    params = {}
    for k, s in cell_param_shapes(cfg).items():
        wide = k.endswith(".w_feat") or k.endswith(".w_score")
        params[f"p.{k}"] = away(s, 0.5, 1.5) if wide else away(s, 0.1, 0.5)
    inputs = {
        "word": away((1, cfg.d_s)),
        "V0": away((1, cfg.n_v, cfg.d_v), 0.3, 1.5),
        "E0": away((1, cfg.n_e, cfg.d_e), 0.3, 1.5),
        "carry.h": away((1, cfg.d_h), 0.1, 0.5),
        "carry.v": away((1, cfg.d_v)),
        "carry.e": away((1, cfg.d_e)),
    }
    for branch in ("v", "s", "l"):
        inputs[f"state.{branch}.h"] = away((1, cfg.d_h), 0.1, 0.5)
        inputs[f"state.{branch}.c"] = away((1, cfg.d_h))
    target = int(rng.integers(0, cfg.d_p))
    weights = {name: rng.normal(size=(1, d)) for name, d in
               (("h", cfg.d_h), ("c", cfg.d_h), ("v", cfg.d_v), ("e", cfg.d_e))}

    def loss(p):
        cell = DecoderCellParams.from_tensors({k[2:]: v for k, v in p.items() if k.startswith("p.")}, "")
        state = DecoderCellState(*(LstmState(p[f"state.{b}.h"], p[f"state.{b}.c"]) for b in "vsl"))
        carry = StageCarry(p["carry.h"], p["carry.v"], p["carry.e"])
        out = cell_step(cell, state, p["word"], p["V0"], p["E0"], carry)
        total = T.nll_gather(T.softmax(out.logits), [target])
        total = T.add(total, _contract(out.carry.h_lang, weights["h"]))
        total = T.add(total, _contract(out.state.state_l.c, weights["c"]))
        total = T.add(total, _contract(out.carry.v_hat, weights["v"]))
        return T.add(total, _contract(out.carry.e_hat, weights["e"]))

    return loss, {**params, **inputs}


def lstm_problem(rng: np.random.Generator) -> Problem:
    d_in, d_h = _dims(rng, 1, 3, 2)
    arrays = {
        "w_in": rng.uniform(-1, 1, size=(4 * d_h, d_in)),
        "w_rec": rng.uniform(-1, 1, size=(4 * d_h, d_h)),
        "bias": rng.uniform(-1, 1, size=(4 * d_h,)),
        "x": rng.normal(size=(2, d_in)),
        "h": rng.uniform(-0.9, 0.9, size=(2, d_h)),
        "c": rng.normal(size=(2, d_h)),
    }
    Rh, Rc = rng.normal(size=(2, d_h)), rng.normal(size=(2, d_h))

    def loss(p):
        s = lstm_step(LstmParams(p["w_in"], p["w_rec"], p["bias"]), LstmState(p["h"], p["c"]), p["x"])
        return T.add(_contract(s.h, Rh), _contract(s.c, Rc))

    return loss, arrays


def attention_problem(rng: np.random.Generator) -> Problem:
    n, d_f, d_h, d_a = _dims(rng, 1, 3, 4)
    arrays = {
        "w_score": rng.normal(size=(1, d_a)),
        "w_feat": rng.normal(size=(d_a, d_f)),
        "w_prev": rng.normal(size=(d_a, d_f)),
        "w_hv": rng.normal(size=(d_a, d_h)),
        "w_hs": rng.normal(size=(d_a, d_h)),
    }
    feats = rng.normal(size=(1, n, d_f))
    prev, hv, hs = rng.normal(size=(1, d_f)), rng.normal(size=(1, d_h)), rng.normal(size=(1, d_h))
    R = rng.normal(size=(1, d_f))

    def loss(p):
        att = AttentionParams(p["w_score"], p["w_feat"], p["w_prev"], p["w_hv"], p["w_hs"])
        feats_t = Tensor(feats)
        w = attention_weights(attention_logits(att, feats_t, Tensor(prev), Tensor(hv), Tensor(hs)))
        return _contract(attend(w, feats_t), R)

    return loss, arrays


def run_gradient_suite(seed: int = 0, trials: int = 20) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    groups: list[tuple[str, Callable[[np.random.Generator], Problem]]] = [
        (op, lambda r, op=op: op_problem(op, r)) for op in OPS
    ]
    groups += [("lstm_step", lstm_problem), ("attention_head", attention_problem),
               ("decoder_cell", cell_problem)]
    for name, make in groups:
        worst, redraws = 0.0, 0
        for _ in range(trials):
            f, arrays = make(rng)
            while not resolvable(f, arrays) and redraws < MAX_REDRAWS:
                redraws += 1
                f, arrays = make(rng)
            worst = max(worst, grad_check(f, arrays, EPS))
        results.append(CheckResult(f"grad {name}", worst, worst < TOLERANCE, trials, redraws))
    return results


def resolvable(f, arrays) -> bool:
    """False if some gradient coordinate is nonzero but below what differences resolve."""
    tape = T.Tape()
    bound = tape.parameters({k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})
    grads = T.backward(tape, f(bound))
    for t in bound.values():
        g = np.abs(grads[t])
        if np.any((g > 1e-8) & (g < RESOLVABLE)):
            return False
    return True


def run_metric_oracles() -> list[CheckResult]:
    out = []

    def check(name, got, want, tol=1e-9):
        err = abs(got - want)
        out.append(CheckResult(name, err, err <= tol))

    check("bleu identity", bleu(["a man rides a horse"], [["a man rides a horse"]])[3], 1.0)
    check("bleu clipping+brevity", bleu([["the"] * 4], [[["the", "cat", "is", "on", "the", "mat"]]])[0],
          0.5 * math.exp(-0.5))
    check("rouge_l lcs", rouge_l(list("abcd"), [list("acbd")]), 0.75)
    idf = build_idf([["a b c d"], ["e f g h"]])
    check("cider identity", cider(["a b c d"], [["a b c d"]], idf)[0], 10.0)
    check("cider single-image corpus", cider(["x y"], [["x y"]], build_idf([["x y"]]))[0], 0.0)
    return out


def run_selfcheck(seed: int = 0, trials: int = 20, corrupt: str | None = None) -> tuple[bool, list[CheckResult], float]:
    """Run everything; ``corrupt`` doubles one op's analytic gradient (test hook)."""
    start = time.perf_counter()
    ctx = T.corrupt_gradient(corrupt, 2.0) if corrupt else contextlib.nullcontext()
    with ctx:
        results = run_gradient_suite(seed, trials)
    results += run_metric_oracles()
    return all(r.passed for r in results), results, time.perf_counter() - start
