import json

import numpy as np
import pytest

from stackvs.checkpoint import load_checkpoint, save_checkpoint
from stackvs.config import StackConfig
from stackvs.data import DatasetRecord, load_dataset, read_features, save_dataset
from stackvs.decoder import decode_greedy, forward_teacher_forced
from stackvs.errors import ConfigError, DataError, FormatError
from stackvs.metrics import tokenize
from stackvs.model import init_model
from stackvs.synthetic import SyntheticSpec, gen_synthetic, recover_caption
from stackvs.trace_io import COLUMNS, export_trace, read_trace
from stackvs.vocab import SPECIALS, UNK, build_vocab


# vocabulary

def test_vocab_min_count_drops_rare_words():
    corpus = [["a", "cat"]] * 4 + [["a", "dog"]] * 5 + [["a"]]
    v = build_vocab(corpus, 5)
    assert "cat" not in v and "dog" in v
    assert v.encode(["cat", "dog"]) == [UNK, v.id("dog")]


def test_vocab_specials_and_determinism():
    v = build_vocab([["rare"]], 5)
    assert v.tokens == SPECIALS
    a = build_vocab([["b", "a", "a"], ["c"]], 1)
    b = build_vocab([["c"], ["b", "a", "a"]], 1)
    assert a.tokens == b.tokens == SPECIALS + ("a", "b", "c")
    with pytest.raises(DataError):
        build_vocab([], 1)


# dataset

def make_records(n=3, n_v=4, d_v=5, n_e=2, seed=0):
    rng = np.random.default_rng(seed)
    return [DatasetRecord(f"im{i}", rng.normal(size=(n_v, d_v)).astype(np.float32),
                          [int(x) for x in rng.integers(0, 3, size=n_e)], [f"caption {i}", "other"])
            for i in range(n)]


def test_dataset_round_trip_bitwise(tmp_path):
    recs = make_records()
    manifest = save_dataset(tmp_path, recs, ["x", "y", "z"], 2)
    ds = load_dataset(manifest)
    assert (ds.n_v, ds.d_v, ds.n_e, len(ds)) == (4, 5, 2, 3)
    for a, b in zip(recs, ds.records):
        assert a.features.astype("<f4").tobytes() == b.features.astype("<f4").tobytes()
        assert (a.image_id, a.attribute_ids, a.references) == (b.image_id, b.attribute_ids, b.references)


def test_dataset_row_count_mismatch_rejected(tmp_path):
    recs = make_records()
    manifest = save_dataset(tmp_path, recs, ["x", "y", "z"], 2)
    m = json.loads(manifest.read_text())
    m["n_v"] = 3
    manifest.write_text(json.dumps(m))
    with pytest.raises(FormatError):
        load_dataset(manifest)


def test_dataset_corrupted_payload_rejected(tmp_path):
    manifest = save_dataset(tmp_path, make_records(), ["x", "y", "z"], 2)
    feat = tmp_path / "features.svsf"
    blob = bytearray(feat.read_bytes())
    blob[40] ^= 0xFF
    feat.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="checksum"):
        load_dataset(manifest)


def test_truncated_features_report_byte_position(tmp_path):
    save_dataset(tmp_path, make_records(), ["x", "y", "z"], 2)
    feat = tmp_path / "features.svsf"
    feat.write_bytes(feat.read_bytes()[:-7])
    with pytest.raises(FormatError, match=r"at byte \d+"):
        read_features(feat)


def test_bad_magic_rejected(tmp_path):
    save_dataset(tmp_path, make_records(), ["x", "y", "z"], 2)
    feat = tmp_path / "features.svsf"
    feat.write_bytes(b"XXXX" + feat.read_bytes()[4:])
    with pytest.raises(FormatError, match="magic"):
        read_features(feat)


def test_non_finite_feature_names_image(tmp_path):
    recs = make_records()
    save_dataset(tmp_path, recs, ["x", "y", "z"], 2)
    feat = tmp_path / "features.svsf"
    blob = bytearray(feat.read_bytes())
    # first float of the second record
    pos = 20 + (16 + 4 * 20) + 16
    blob[pos:pos + 4] = np.array([np.inf], dtype="<f4").tobytes()
    feat.write_bytes(bytes(blob))
    m = json.loads((tmp_path / "manifest.json").read_text())
    import hashlib
    m["features_sha256"] = hashlib.sha256(bytes(blob)).hexdigest()
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DataError, match="im1"):
        load_dataset(tmp_path / "manifest.json")


def test_not_a_manifest(tmp_path):
    p = tmp_path / "m.json"
    p.write_text("{not json")
    with pytest.raises(FormatError):
        load_dataset(p)


# synthetic

def test_synthetic_deterministic_and_count(tmp_path):
    spec = SyntheticSpec()
    a = gen_synthetic(spec, 4, tmp_path / "a")
    gen_synthetic(spec, 4, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    assert len(a.records) == spec.n_images
    assert len({r.references[0] for r in a.records}) == spec.n_images


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_synthetic_captions_recoverable_from_features(tmp_path, seed):
    ds = gen_synthetic(SyntheticSpec(), seed, tmp_path)
    loaded = load_dataset(ds.manifest)
    for rec in loaded.records:
        assert recover_caption(rec.features, ds.basis, ds.pattern_words) == rec.references[0]


def test_synthetic_vocab_size():
    from stackvs.synthetic import generate
    records, *_ = generate(SyntheticSpec(), 0)
    v = build_vocab([tokenize(r.references[0]) for r in records], 1)
    assert len(v) <= 4 + 16


def test_synthetic_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(n_images=0)
    with pytest.raises(ConfigError):
        SyntheticSpec(n_v=2, caption_len=5)


# checkpoints

CFG = StackConfig(n_stages=2, d_v=3, d_e=2, d_h=4, d_a=3, d_s=3, d_p=7, n_v=2, n_e=2, t_max=4)


def test_checkpoint_round_trip_at_32_bit(tmp_path):
    m = init_model(CFG, 5, seed=0)
    extra = {"adam.m.x": np.arange(3.0)}
    save_checkpoint(m, tmp_path / "c.svsc", {"epoch": 3}, extra)
    ck = load_checkpoint(tmp_path / "c.svsc", CFG)
    assert ck.meta == {"epoch": 3}
    assert ck.extra["adam.m.x"].tolist() == [0.0, 1.0, 2.0]
    assert list(ck.model.arrays) == list(m.arrays)
    for k, v in m.arrays.items():
        assert np.array_equal(ck.model.arrays[k], v.astype(np.float32).astype(np.float64))
    # saving the reloaded model reproduces the file
    save_checkpoint(ck.model, tmp_path / "d.svsc", {"epoch": 3}, extra)
    assert (tmp_path / "c.svsc").read_bytes() == (tmp_path / "d.svsc").read_bytes()


def test_checkpoint_config_mismatch_refused(tmp_path):
    save_checkpoint(init_model(CFG, 5), tmp_path / "c.svsc")
    other = StackConfig(**{**CFG.to_dict(), "d_h": 5})
    with pytest.raises(ConfigError, match="checkpoint:.*\n.*expected:"):
        load_checkpoint(tmp_path / "c.svsc", other)


@pytest.mark.parametrize("where", ["payload", "header", "truncate"])
def test_checkpoint_corruption_refused(tmp_path, where):
    p = tmp_path / "c.svsc"
    save_checkpoint(init_model(CFG, 5), p)
    blob = bytearray(p.read_bytes())
    if where == "payload":
        blob[-40] ^= 0x01
    elif where == "header":
        blob[20] ^= 0x01
    else:
        blob = blob[:-100]
    p.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_checkpoint(p)


# traces

@pytest.mark.parametrize("n_stages", [1, 3])
def test_trace_rows_and_simplex(tmp_path, n_stages):
    cfg = StackConfig(**{**CFG.to_dict(), "n_stages": n_stages})
    m = init_model(cfg, 5, seed=1)
    rng = np.random.default_rng(1)
    V0, ids = rng.normal(size=(cfg.n_v, cfg.d_v)), [0, 4]
    roll = decode_greedy(m, V0, ids)
    n = export_trace(roll.trace, tmp_path / "t.csv")
    steps = len(roll.tokens)
    assert n == n_stages * steps * (cfg.n_v + cfg.n_e)
    rows = read_trace(tmp_path / "t.csv")
    assert len(rows) == n
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == ",".join(COLUMNS)
    sums = {}
    for r in rows:
        sums[(r["stage"], r["t"], r["branch"])] = sums.get((r["stage"], r["t"], r["branch"]), 0.0) + r["weight"]
        assert 0.0 <= r["ratio"] <= 1.0
    assert all(abs(s - 1) <= 1e-9 for s in sums.values())
    export_trace(roll.trace, tmp_path / "u.csv")
    assert (tmp_path / "t.csv").read_bytes() == (tmp_path / "u.csv").read_bytes()


def test_trace_from_teacher_forcing(tmp_path):
    m = init_model(CFG, 5, seed=2)
    rng = np.random.default_rng(2)
    tf = forward_teacher_forced(m, rng.normal(size=(2, 3)), [1, 2], [4, 5])
    assert export_trace(tf.traces[0], tmp_path / "t.csv") == 2 * 3 * 4
