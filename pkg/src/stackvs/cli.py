"""Command-line front end: ``stackvs <command> ...``.

Exit codes: 0 ok, 1 self-check failure, 2 usage/config, 3 data or I/O,
4 numeric failure. Logs go to stderr; machine-readable results to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import StackConfig
from .data import Dataset, load_dataset
from .decoder import decode_beam, decode_greedy
from .errors import ConfigError, DataError, FormatError, NumericError, ShapeError
from .metrics import METRIC_NAMES, evaluate, tokenize
from .model import ModelParams, init_model
from .synthetic import SyntheticSpec, gen_synthetic
from .trace_io import export_trace
from .trainer import AdamState, TrainConfig, train
from .vocab import Vocabulary, build_vocab

log = logging.getLogger("stackvs")

EXIT_OK, EXIT_SELFCHECK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

# StackConfig fields that come from the dataset and vocabulary, not the run file
DATA_DERIVED = ("d_v", "n_v", "n_e", "d_p")


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    """A run file: ``{"model": {...}, "train": {...}, "seed": int}``."""

    model: dict
    train: TrainConfig
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(data) - {"model", "train", "seed"}
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        model = dict(data.get("model", {}))
        allowed = {f.name for f in fields(StackConfig)} - set(DATA_DERIVED)
        bad = set(model) - allowed
        if bad & set(DATA_DERIVED):
            raise ConfigError(f"model keys {sorted(bad & set(DATA_DERIVED))} are taken from the data, not the config")
        if bad:
            raise ConfigError(f"unknown model config keys: {sorted(bad)}")
        seed = data.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError("seed must be an integer")
        train_cfg = dict(data.get("train", {}))
        if "seed" in train_cfg:
            raise ConfigError("set the seed at the top level, not under 'train'")
        train_cfg["seed"] = seed
        cfg = cls(model, TrainConfig.from_dict(train_cfg), seed)
        # validate model values now, with placeholder data dims
        cfg.stack_config(n_v=1, d_v=1, n_e=1, d_p=4)
        return cfg

    @classmethod
    def load(cls, path: Path) -> RunConfig:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(data)

    def stack_config(self, **data_dims) -> StackConfig:
        try:
            return StackConfig(**self.model, **data_dims)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _threads() -> int:
    raw = os.environ.get("STACKVS_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"STACKVS_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"STACKVS_THREADS must be a positive integer, got {raw!r}")
    return n


def _load_model(ckpt_path: Path, data: Dataset) -> tuple[ModelParams, Vocabulary]:
    ckpt = load_checkpoint(ckpt_path)
    model = ckpt.model
    cfg = model.config
    if (cfg.n_v, cfg.d_v, cfg.n_e) != (data.n_v, data.d_v, data.n_e):
        raise DataError(
            f"dataset dims (n_v={data.n_v}, d_v={data.d_v}, n_e={data.n_e}) do not match the "
            f"checkpoint (n_v={cfg.n_v}, d_v={cfg.d_v}, n_e={cfg.n_e})"
        )
    if model.n_attributes != len(data.attributes):
        raise DataError(f"dataset has {len(data.attributes)} attributes, checkpoint expects {model.n_attributes}")
    tokens = ckpt.meta.get("vocab")
    if not tokens:
        raise FormatError(f"{ckpt_path}: checkpoint carries no vocabulary")
    vocab = Vocabulary(tuple(tokens), ckpt.meta.get("vocab_min_count", 1))
    if len(vocab) != cfg.d_p:
        raise FormatError(f"{ckpt_path}: vocabulary size {len(vocab)} != d_p {cfg.d_p}")
    return model, vocab


# commands


def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec(
        n_images=args.images, n_v=args.n_v, d_v=args.d_v, n_e=args.n_e,
        n_attributes=args.n_attributes, vocab_size=args.vocab_size,
        caption_len=args.caption_len, n_refs=args.refs,
    )
    ds = gen_synthetic(spec, args.seed, Path(args.out))
    log.info("wrote %d records to %s", len(ds.records), ds.manifest)
    _emit({"manifest": str(ds.manifest), "records": len(ds.records)})
    return EXIT_OK


def cmd_train(args) -> int:
    run = RunConfig.load(Path(args.config))
    data = load_dataset(Path(args.data))
    out = Path(args.out)
    start_epoch = 0
    adam = None
    if args.resume:
        ckpt = load_checkpoint(Path(args.resume))
        tokens = ckpt.meta.get("vocab")
        if not tokens:
            raise FormatError(f"{args.resume}: checkpoint carries no vocabulary")
        vocab = Vocabulary(tuple(tokens), ckpt.meta.get("vocab_min_count", run.train.vocab_min_count))
        expected = run.stack_config(n_v=data.n_v, d_v=data.d_v, n_e=data.n_e, d_p=len(vocab))
        if ckpt.model.config != expected:
            raise ConfigError(
                f"{args.resume}: checkpoint config does not match the run config\n"
                f"  checkpoint: {ckpt.model.config}\n  run:        {expected}"
            )
        model = ckpt.model
        start_epoch = int(ckpt.meta["epoch"]) + 1
        names = list(model.arrays)
        try:
            adam = AdamState(
                m={k: ckpt.extra[f"adam.m.{k}"].astype(np.float64) for k in names},
                v={k: ckpt.extra[f"adam.v.{k}"].astype(np.float64) for k in names},
                step=int(ckpt.meta["adam_step"]),
            )
        except KeyError as exc:
            raise FormatError(f"{args.resume}: missing optimizer state {exc}") from None
        log.info("resuming from %s at epoch %d", args.resume, start_epoch)
    else:
        vocab = build_vocab((tokenize(r) for rec in data.records for r in rec.references),
                            run.train.vocab_min_count)
        cfg = run.stack_config(n_v=data.n_v, d_v=data.d_v, n_e=data.n_e, d_p=len(vocab))
        model = init_model(cfg, len(data.attributes), run.seed)
    log.info("vocabulary %d tokens, %d parameters", len(vocab), model.n_parameters())
    meta = {"vocab": list(vocab.tokens), "vocab_min_count": vocab.min_count,
            "train": run.train.to_dict()}
    result = train(run.train, data.records, vocab, model, phase=args.phase,
                   start_epoch=start_epoch, adam=adam, out_dir=out, checkpoint_meta=meta)
    final = result.log[-1] if result.log else None
    _emit({"out": str(out), "epochs": len(result.log), "updates": result.updates, "final": final})
    return EXIT_OK


def _caption_one(model, vocab, rec, beam):
    feats = np.asarray(rec.features, dtype=np.float64)
    ids = np.asarray(rec.attribute_ids)
    roll = decode_greedy(model, feats, ids) if beam == 1 else decode_beam(model, feats, ids, beam)
    return {"image_id": rec.image_id, "caption": " ".join(vocab.decode(roll.tokens))}


def cmd_caption(args) -> int:
    if args.beam < 1:
        raise UsageError(f"--beam must be >= 1, got {args.beam}")
    threads = _threads()
    data = load_dataset(Path(args.data))
    model, vocab = _load_model(Path(args.ckpt), data)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        out = list(pool.map(lambda r: _caption_one(model, vocab, r, args.beam), data.records))
    Path(args.out).write_text(json.dumps(out, indent=2) + "\n", encoding="utf-8")
    log.info("captioned %d images with beam %d (%d threads)", len(out), args.beam, threads)
    _emit({"out": str(args.out), "captions": len(out)})
    return EXIT_OK


def load_candidates(path: Path) -> list[dict]:
    try:
        items = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(items, list) or not all(
        isinstance(c, dict) and isinstance(c.get("image_id"), str) and isinstance(c.get("caption"), str)
        for c in items
    ):
        raise DataError(f"{path}: expected a list of {{\"image_id\", \"caption\"}} objects")
    return items


def cmd_eval(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in metrics if m not in METRIC_NAMES]
    if unknown or not metrics:
        raise UsageError(f"unknown metric(s) {unknown}; choose from {', '.join(METRIC_NAMES)}")
    cands = load_candidates(Path(args.candidates))
    if not cands:
        raise DataError(f"{args.candidates}: no candidates")
    data = load_dataset(Path(args.references))
    refs = [data.by_id(c["image_id"]).references for c in cands]
    scores = evaluate([c["caption"] for c in cands], refs, metrics)
    _emit(scores)
    return EXIT_OK


def cmd_trace(args) -> int:
    data = load_dataset(Path(args.data))
    model, vocab = _load_model(Path(args.ckpt), data)
    rec = data.by_id(args.image_id)
    roll = decode_greedy(model, np.asarray(rec.features, dtype=np.float64), np.asarray(rec.attribute_ids))
    rows = export_trace(roll.trace, Path(args.out))
    _emit({"out": str(args.out), "rows": rows, "caption": " ".join(vocab.decode(roll.tokens))})
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    ok, results, seconds = run_selfcheck(args.seed, args.trials, args.corrupt_op)
    for r in results:
        (log.info if r.passed else log.error)("%s", r.line())
        if not r.passed:
            print(r.line())
    print(f"selfcheck {'passed' if ok else 'FAILED'}: {sum(r.passed for r in results)}/{len(results)} "
          f"checks in {seconds:.1f}s")
    return EXIT_OK if ok else EXIT_SELFCHECK


# parser


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stackvs", description=__doc__.splitlines()[0])
    ap.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a learnable toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=_positive_int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-v", type=_positive_int, default=4)
    p.add_argument("--d-v", type=_positive_int, default=8)
    p.add_argument("--n-e", type=_positive_int, default=3)
    p.add_argument("--n-attributes", type=_positive_int, default=None)
    p.add_argument("--vocab-size", type=_positive_int, default=16, help="content words incl. the leading 'a'")
    p.add_argument("--caption-len", type=_positive_int, default=5)
    p.add_argument("--refs", type=_positive_int, default=1, help="references per image")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train", help="train from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--phase", choices=["xe", "scst", "both"], default="both")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="caption every record of a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("eval", help="score candidate captions against references")
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True, help="dataset manifest holding the references")
    p.add_argument("--metrics", default=",".join(METRIC_NAMES))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trace", help="export the attention trace of one greedy caption")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--image-id", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("selfcheck", help="gradient checks and metric oracles")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=_positive_int, default=20)
    p.add_argument("--corrupt-op", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selfcheck)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(stream=sys.stderr, level=args.log_level,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, FormatError, ShapeError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
