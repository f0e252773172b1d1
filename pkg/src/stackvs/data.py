"""Dataset records and the on-disk dataset layout.

A dataset is a JSON manifest pointing at three sidecars:

* a binary feature file (``.svsf``): magic ``SVSF``, u32 version, u32 N_v,
  u32 d_v, u32 record count, then per record a 16-byte MD5 of the image id
  followed by ``N_v * d_v`` little-endian float32 values;
* a JSON-lines file of ``{image_id, attribute_ids, references}``;
* a JSON list naming the attribute vocabulary.

The manifest also records the SHA-256 of the feature file so that any
corruption of the payload is refused on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, FormatError

FEATURE_MAGIC = b"SVSF"
FEATURE_VERSION = 1
MANIFEST_FORMAT = "stackvs-dataset"
MANIFEST_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass
class DatasetRecord:
    image_id: str
    features: np.ndarray          # (N_v, d_v)
    attribute_ids: list[int]
    references: list[str]

    def __post_init__(self):
        if not self.references:
            raise DataError(f"{self.image_id}: a record needs at least one reference")
        if not np.all(np.isfinite(self.features)):
            raise DataError(f"{self.image_id}: non-finite feature value")


@dataclass
class Dataset:
    records: list[DatasetRecord]
    attributes: list[str]
    n_v: int
    d_v: int
    n_e: int
    manifest: Path | None = None

    def __len__(self) -> int:
        return len(self.records)

    def by_id(self, image_id: str) -> DatasetRecord:
        for rec in self.records:
            if rec.image_id == image_id:
                return rec
        raise DataError(f"unknown image id {image_id!r}")


def image_hash(image_id: str) -> bytes:
    return hashlib.md5(image_id.encode("utf-8")).digest()


def write_features(path: Path, records: Sequence[DatasetRecord], n_v: int, d_v: int) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n_v, d_v, len(records)))
        for rec in records:
            if rec.features.shape != (n_v, d_v):
                raise DataError(f"{rec.image_id}: features {rec.features.shape} != ({n_v}, {d_v})")
            fh.write(image_hash(rec.image_id))
            fh.write(np.ascontiguousarray(rec.features, dtype="<f4").tobytes())


def read_features(path: Path) -> tuple[int, int, list[tuple[bytes, np.ndarray]]]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header at byte {len(blob)}")
    magic, version, n_v, d_v, count = _HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    stride = 16 + 4 * n_v * d_v
    out = []
    pos = _HEADER.size
    for k in range(count):
        if pos + stride > len(blob):
            raise FormatError(f"{path}: truncated payload in record {k} at byte {len(blob)}")
        digest = blob[pos:pos + 16]
        feats = np.frombuffer(blob, dtype="<f4", count=n_v * d_v, offset=pos + 16)
        out.append((digest, feats.reshape(n_v, d_v).astype(np.float32)))
        pos += stride
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} trailing bytes after byte {pos}")
    return n_v, d_v, out


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def save_dataset(
    directory: Path, records: Sequence[DatasetRecord], attributes: Sequence[str], n_e: int,
    extra: dict | None = None,
) -> Path:
    """Write manifest + sidecars into ``directory``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not records:
        raise DataError("cannot save an empty dataset")
    n_v, d_v = records[0].features.shape
    for rec in records:
        if len(rec.attribute_ids) != n_e:
            raise DataError(f"{rec.image_id}: {len(rec.attribute_ids)} attribute ids, expected {n_e}")
    write_features(directory / "features.svsf", records, n_v, d_v)
    with open(directory / "records.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            row = {"image_id": rec.image_id, "attribute_ids": [int(a) for a in rec.attribute_ids],
                   "references": list(rec.references)}
            fh.write(_dump_json(row) + "\n")
    (directory / "attributes.json").write_text(_dump_json(list(attributes)) + "\n", encoding="utf-8")
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "n_v": int(n_v),
        "d_v": int(d_v),
        "n_e": int(n_e),
        "n_records": len(records),
        "features": "features.svsf",
        "features_sha256": _sha256(directory / "features.svsf"),
        "records": "records.jsonl",
        "attributes": "attributes.json",
    }
    if extra:
        manifest.update(extra)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def load_dataset(manifest_path: Path) -> Dataset:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: not valid JSON ({exc})") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{manifest_path}: not a {MANIFEST_FORMAT} manifest")
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{manifest_path}: unsupported manifest version {manifest.get('version')}")
    try:
        n_v, d_v, n_e = int(manifest["n_v"]), int(manifest["d_v"]), int(manifest["n_e"])
        feat_path = manifest_path.parent / manifest["features"]
        rec_path = manifest_path.parent / manifest["records"]
        attr_path = manifest_path.parent / manifest["attributes"]
        digest = manifest["features_sha256"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{manifest_path}: missing or malformed field {exc}") from exc

    if _sha256(feat_path) != digest:
        raise FormatError(f"{feat_path}: checksum mismatch")
    file_nv, file_dv, blocks = read_features(feat_path)
    if (file_nv, file_dv) != (n_v, d_v):
        raise FormatError(f"{feat_path}: header dims ({file_nv}, {file_dv}) != manifest ({n_v}, {d_v})")

    attributes = json.loads(attr_path.read_text(encoding="utf-8"))
    rows = [json.loads(line) for line in rec_path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if len(rows) != len(blocks):
        raise FormatError(f"{rec_path}: {len(rows)} records but {len(blocks)} feature blocks")
    if "n_records" in manifest and manifest["n_records"] != len(rows):
        raise FormatError(f"{manifest_path}: n_records {manifest['n_records']} != {len(rows)}")

    records = []
    for row, (digest16, feats) in zip(rows, blocks):
        image_id = str(row["image_id"])
        if image_hash(image_id) != digest16:
            raise FormatError(f"{feat_path}: feature block does not belong to {image_id!r}")
        ids = [int(a) for a in row["attribute_ids"]]
        if len(ids) != n_e:
            raise DataError(f"{image_id}: {len(ids)} attribute ids, manifest says {n_e}")
        if any(a < 0 or a >= len(attributes) for a in ids):
            raise DataError(f"{image_id}: attribute id outside vocabulary of {len(attributes)}")
        records.append(DatasetRecord(image_id, feats, ids, [str(r) for r in row["references"]]))
    return Dataset(records, list(attributes), n_v, d_v, n_e, manifest_path)
