"""Checkpoint files (``.svsc``).

Layout: magic ``SVSC``, u32 version, u32 header length, a UTF-8 JSON header
(config, parameter manifest of name/shape/byte offset, free-form metadata),
the flat little-endian float32 payload, and finally the SHA-256 of every
preceding byte. Values are computed in float64 and rounded on save.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .config import StackConfig
from .errors import ConfigError, FormatError
from .model import ModelParams

MAGIC = b"SVSC"
VERSION = 1
_PREAMBLE = struct.Struct("<4sII")
_DIGEST = 32


@dataclass
class Checkpoint:
    model: ModelParams
    meta: dict = field(default_factory=dict)
    extra: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(
    model: ModelParams,
    path: Path,
    meta: Mapping | None = None,
    extra: Mapping[str, np.ndarray] | None = None,
) -> None:
    """Write ``model`` (plus optional named ``extra`` arrays) to ``path``."""
    arrays = dict(model.arrays)
    for name, arr in (extra or {}).items():
        if name in arrays:
            raise ValueError(f"extra array {name!r} shadows a model parameter")
        arrays[name] = arr
    manifest = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {
        "config": model.config.to_dict(),
        "n_attributes": model.n_attributes,
        "n_model_params": len(model.arrays),
        "manifest": manifest,
        "payload_bytes": offset,
        "meta": dict(meta or {}),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREAMBLE.pack(MAGIC, VERSION, len(head)) + head + b"".join(chunks)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path: Path, expected: StackConfig | None = None) -> Checkpoint:
    """Read and verify a checkpoint; refuse it if ``expected`` differs from its config."""
    blob = Path(path).read_bytes()
    if len(blob) < _PREAMBLE.size + _DIGEST:
        raise FormatError(f"{path}: file too short ({len(blob)} bytes)")
    magic, version, head_len = _PREAMBLE.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{path}: checksum mismatch")
    start = _PREAMBLE.size
    try:
        header = json.loads(body[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    payload = body[start + head_len:]
    if len(payload) != header["payload_bytes"]:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header says {header['payload_bytes']}")

    config = StackConfig.from_dict(header["config"])
    if expected is not None and expected != config:
        raise ConfigError(
            f"{path}: checkpoint config does not match\n  checkpoint: {config}\n  expected:   {expected}"
        )

    arrays: dict[str, np.ndarray] = {}
    covered = 0
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if entry["offset"] != covered:
            raise FormatError(f"{path}: manifest entry {entry['name']} overlaps or leaves a gap")
        if covered + 4 * count > len(payload):
            raise FormatError(f"{path}: {entry['name']} runs past the payload at byte {covered}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=covered)
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
        covered += 4 * count
    if covered != len(payload):
        raise FormatError(f"{path}: manifest covers {covered} of {len(payload)} payload bytes")

    names = list(arrays)
    n_model = header["n_model_params"]
    model = ModelParams(config, int(header["n_attributes"]), {k: arrays[k] for k in names[:n_model]})
    extra = {k: arrays[k] for k in names[n_model:]}
    return Checkpoint(model, header.get("meta", {}), extra)
