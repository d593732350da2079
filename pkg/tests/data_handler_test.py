import os
import struct

import numpy as np
import pandas as pd
import pytest

from src.config import DataConfig
from src.data_handler import (
    MANIFEST_FILE,
    PTBXL_SUPERCLASSES,
    TAXONOMY_FILE,
    DataHandler,
    EcgDataset,
    EcgRecord,
    labels_to_multihot,
    load_record,
    multihot_to_labels,
    preprocess,
    read_manifest,
    read_taxonomy,
    stratified_split,
    synth_dataset,
    write_manifest,
    write_record,
)
from src.errors import ConfigError, FormatError, LengthError, UnsupportedRateError


def _record(leads=2, samples=50, rate=100, value=None, seed=0):
    if value is None:
        signal = np.random.default_rng(seed).standard_normal((leads, samples))
    else:
        signal = np.full((leads, samples), value)
    return EcgRecord("r1", signal, rate, np.array([1, 0]))


# =============================================================================
# 1) ECGB records
# =============================================================================
def test_hand_built_fixture_decodes(tmp_path):
    path = tmp_path / "fixture.ecgb"
    payload = struct.pack("<6f", 1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    path.write_bytes(b"ECGB" + struct.pack("<IIII", 1, 2, 3, 500) + payload)
    rec = load_record(str(path))
    np.testing.assert_array_equal(rec.signal, [[1, 2, 3], [4, 5, 6]])
    assert rec.sample_rate_hz == 500
    assert rec.id == "fixture"
    assert rec.signal.dtype == np.float32


def test_record_round_trip_is_bit_exact(tmp_path):
    rec = _record(leads=12, samples=333, rate=500)
    path = tmp_path / "records" / "r1.ecgb"
    write_record(str(path), rec)
    loaded = load_record(str(path), "r1", rec.labels)
    np.testing.assert_array_equal(loaded.signal, rec.signal)
    assert loaded.signal.tobytes() == rec.signal.tobytes()
    assert loaded.sample_rate_hz == 500
    assert os.path.getsize(path) == 20 + 12 * 333 * 4


def test_bad_magic_version_and_truncation(tmp_path):
    path = tmp_path / "r.ecgb"
    write_record(str(path), _record())
    data = path.read_bytes()

    (tmp_path / "magic.ecgb").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="magic"):
        load_record(str(tmp_path / "magic.ecgb"))

    (tmp_path / "version.ecgb").write_bytes(data[:4] + struct.pack("<I", 2) + data[8:])
    with pytest.raises(FormatError, match="version"):
        load_record(str(tmp_path / "version.ecgb"))

    (tmp_path / "short.ecgb").write_bytes(data[:-4])
    with pytest.raises(LengthError):
        load_record(str(tmp_path / "short.ecgb"))

    (tmp_path / "header.ecgb").write_bytes(data[:10])
    with pytest.raises(LengthError):
        load_record(str(tmp_path / "header.ecgb"))


def test_record_rejects_more_than_twelve_leads():
    with pytest.raises(FormatError):
        EcgRecord("x", np.zeros((13, 10)), 100, np.zeros(2))


# =============================================================================
# 2) Preprocessing
# =============================================================================
def test_preprocess_decimates_and_crops_long_records():
    rec = _record(leads=12, samples=500 * 30, rate=500)
    out = preprocess(rec, 100, 10)
    assert out.shape == (12, 1000)
    np.testing.assert_allclose(out[:, :3], rec.signal[:, :15].reshape(12, 3, 5).mean(axis=2), rtol=0, atol=1e-6)


def test_preprocess_pads_short_records_with_trailing_zeros():
    rec = _record(samples=600, rate=100)
    out = preprocess(rec)
    assert out.shape == (2, 1000)
    np.testing.assert_array_equal(out[:, :600], rec.signal)
    np.testing.assert_array_equal(out[:, 600:], 0.0)


def test_preprocess_constant_signal_stays_constant():
    out = preprocess(_record(samples=5000, rate=500, value=0.25), 100, 10)
    np.testing.assert_array_equal(out, np.full((2, 1000), 0.25, dtype=np.float32))


@pytest.mark.parametrize("samples,rate", [(37, 100), (1234, 500), (20000, 200), (1, 100)])
def test_preprocess_length_is_always_the_target(samples, rate):
    assert preprocess(_record(samples=samples, rate=rate), 100, 10).shape == (2, 1000)


@pytest.mark.parametrize("rate", [250, 50])
def test_preprocess_rejects_non_integer_factor(rate):
    with pytest.raises(UnsupportedRateError):
        preprocess(_record(rate=rate), 100, 10)


# =============================================================================
# 3) Labels, taxonomy, manifest
# =============================================================================
def test_label_conversion():
    names = ["NORM", "MI", "STTC", "CD", "HYP"]
    vector = labels_to_multihot("MI;HYP", names)
    np.testing.assert_array_equal(vector, [0, 1, 0, 0, 1])
    assert multihot_to_labels(vector, names) == "MI;HYP"
    np.testing.assert_array_equal(labels_to_multihot("", names), np.zeros(5))
    with pytest.raises(FormatError, match="taxonomy"):
        labels_to_multihot("AFIB", names)


def test_manifest_round_trip_and_duplicate_ids(tmp_path):
    df = pd.DataFrame({"id": ["a", "b"], "path": ["records/a.ecgb", "records/b.ecgb"],
                       "labels": ["NORM", ""], "split": [1, 2]})
    write_manifest(df, str(tmp_path / MANIFEST_FILE))
    loaded = read_manifest(str(tmp_path / MANIFEST_FILE))
    assert loaded["labels"].tolist() == ["NORM", ""]
    assert loaded["split"].tolist() == [1, 2]

    dup = pd.concat([df, df.iloc[:1]])
    write_manifest(dup, str(tmp_path / "dup.csv"))
    with pytest.raises(FormatError, match="duplicate"):
        read_manifest(str(tmp_path / "dup.csv"))

    with pytest.raises(FileNotFoundError):
        read_manifest(str(tmp_path / "missing.csv"))


# =============================================================================
# 4) Stratified split
# =============================================================================
def _manifest(labels):
    return pd.DataFrame({"id": [f"r{i}" for i in range(len(labels))], "path": "x", "labels": labels})


def test_split_balances_a_single_class():
    manifest = _manifest(["A"] * 50 + [""] * 50)
    folds = stratified_split(manifest, ["A"], n_folds=10, seed=0)
    positives = folds[manifest["labels"] == "A"].value_counts()
    assert sorted(positives.index) == list(range(1, 11))
    assert positives.between(4, 6).all()
    assert folds.value_counts().between(9, 11).all()


def test_split_is_seed_deterministic():
    rng = np.random.default_rng(0)
    names = ["A", "B", "C"]
    labels = [multihot_to_labels((rng.random(3) < 0.4).astype(int), names) for _ in range(80)]
    manifest = _manifest(labels)
    first = stratified_split(manifest, names, 10, seed=5)
    pd.testing.assert_series_equal(first, stratified_split(manifest, names, 10, seed=5))
    assert set(first) <= set(range(1, 11))


def test_split_respects_publisher_column():
    manifest = _manifest(["A"] * 6)
    manifest["split"] = [3, 1, 4, 1, 5, 9]
    assert stratified_split(manifest, ["A"], 10, seed=0).tolist() == [3, 1, 4, 1, 5, 9]


def test_split_warns_for_rare_classes(caplog):
    manifest = _manifest(["A"] * 3 + ["B"] * 40)
    stratified_split(manifest, ["A", "B"], 10, seed=0)
    assert "best-effort" in caplog.text


# =============================================================================
# 5) Synthetic data
# =============================================================================
def test_synth_dataset_is_byte_identical_across_runs(tmp_path):
    for run in ("a", "b"):
        synth_dataset(str(tmp_path / run), n_records=12, n_classes=3, n_leads=2, length=80, seed=9)
    for rel in (MANIFEST_FILE, TAXONOMY_FILE, os.path.join("records", "rec00007.ecgb")):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_synth_dataset_layout_and_one_hot_labels(tmp_path):
    manifest = synth_dataset(str(tmp_path), n_records=10, n_classes=2, n_leads=3, length=120, co_occurrence=0.0)
    assert read_taxonomy(str(tmp_path / TAXONOMY_FILE)) == ["C0", "C1"]
    assert manifest["labels"].tolist() == ["C0", "C1"] * 5
    rec = load_record(str(tmp_path / manifest.loc[0, "path"]))
    assert rec.signal.shape == (3, 120)
    assert set(manifest["split"]) <= set(range(1, 11))


def test_synth_dataset_needs_a_record_per_class(tmp_path):
    with pytest.raises(ConfigError):
        synth_dataset(str(tmp_path), n_records=2, n_classes=3)


def test_synth_dataset_with_a_bundled_taxonomy(tmp_path):
    synth_dataset(str(tmp_path), n_records=10, n_classes=5, n_leads=1, length=20, class_names=PTBXL_SUPERCLASSES)
    assert read_taxonomy(str(tmp_path / TAXONOMY_FILE)) == ["NORM", "MI", "STTC", "CD", "HYP"]
    with pytest.raises(ConfigError, match="taxonomy"):
        synth_dataset(str(tmp_path), n_records=10, n_classes=3, class_names=PTBXL_SUPERCLASSES)


# =============================================================================
# 6) DataHandler / EcgDataset
# =============================================================================
def test_handler_loads_and_splits(tiny_dataset):
    handler = DataHandler(DataConfig(target_hz=100, target_seconds=1), str(tiny_dataset))
    ds = handler.load()
    assert len(ds) == 40
    assert ds.signals.shape == (40, 2, 100)
    assert ds.class_names == ["C0", "C1"]
    train, val, test = handler.splits(ds)
    assert len(train) + len(val) + len(test) == 40
    assert not set(train.ids) & set(val.ids)
    assert not set(val.ids) & set(test.ids)


def test_handler_skips_unlabeled_records(tmp_path):
    write_record(str(tmp_path / "records" / "a.ecgb"), _record(samples=100))
    write_record(str(tmp_path / "records" / "b.ecgb"), _record(samples=100, seed=1))
    write_manifest(pd.DataFrame({"id": ["a", "b"], "path": ["records/a.ecgb", "records/b.ecgb"],
                                 "labels": ["NORM", ""]}), str(tmp_path / MANIFEST_FILE))
    ds = DataHandler(DataConfig(target_seconds=1), str(tmp_path)).load()
    assert ds.ids == ["a"]
    assert ds.class_names == ["NORM"]


def test_handler_rejects_empty_validation_split(tiny_dataset):
    handler = DataHandler(DataConfig(target_seconds=1, val_folds=[9], test_folds=[10]), str(tiny_dataset))
    ds = handler.load()
    ds.folds[ds.folds == 9] = 1
    with pytest.raises(ConfigError, match="validation"):
        handler.splits(ds)


def test_shuffled_batches_cover_every_id_once():
    ds = EcgDataset(ids=[f"r{i}" for i in range(10)], signals=np.zeros((10, 1, 4)),
                    labels=np.zeros((10, 2)), folds=np.ones(10, dtype=int), class_names=["A", "B"])
    seen = [i for ids, _, _ in ds.batches(3, np.random.default_rng(0)) for i in ids]
    assert sorted(seen) == sorted(ds.ids)
    again = [i for ids, _, _ in ds.batches(3, np.random.default_rng(0)) for i in ids]
    assert seen == again
