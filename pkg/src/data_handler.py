import logging
import os
import struct
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.config import DataConfig
from src.errors import ConfigError, FormatError, LengthError, UnsupportedRateError

logger = logging.getLogger(__name__)

# =============================================================================
# 1) Class taxonomies and on-disk layout
# =============================================================================
PTBXL_SUPERCLASSES = ("NORM", "MI", "STTC", "CD", "HYP")
CPSC2018_CLASSES = ("NORM", "AFIB", "I-AVB", "LBBB", "RBBB", "PAC", "PVC", "STE", "STD")
TAXONOMIES = {"ptbxl": PTBXL_SUPERCLASSES, "cpsc2018": CPSC2018_CLASSES}

ECGB_MAGIC = b"ECGB"
ECGB_VERSION = 1
_ECGB_HEADER = struct.Struct("<4sIIII")

MANIFEST_FILE = "manifest.csv"
TAXONOMY_FILE = "classes.txt"
RECORDS_DIR = "records"
MANIFEST_COLUMNS = ["id", "path", "labels", "split"]


@dataclass
class EcgRecord:
    """
    Attributes:
        id:             record identifier (unique within a manifest)
        signal:         (C_lead, T) float32, millivolt-scaled
        sample_rate_hz: sampling rate of `signal`
        labels:         multi-hot (n_classes,) int8, empty when unknown
    """
    id: str
    signal: np.ndarray
    sample_rate_hz: int
    labels: np.ndarray

    def __post_init__(self):
        self.signal = np.asarray(self.signal, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.signal.ndim != 2 or not 1 <= self.signal.shape[0] <= 12 or self.signal.shape[1] < 1:
            raise FormatError(f"record {self.id}: signal must be (1..12 leads, T >= 1), got {self.signal.shape}")


# =============================================================================
# ECGB binary records
#   magic "ECGB" | u32 version | u32 channels | u32 samples | u32 rate_hz
#   | channels*samples f32 little-endian, channel-major
# =============================================================================
def write_record(path: str, rec: EcgRecord):
    channels, samples = rec.signal.shape
    header = _ECGB_HEADER.pack(ECGB_MAGIC, ECGB_VERSION, channels, samples, int(rec.sample_rate_hz))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(rec.signal, dtype="<f4").tobytes())


def load_record(path: str, record_id: Optional[str] = None, labels: Optional[np.ndarray] = None) -> EcgRecord:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _ECGB_HEADER.size:
        raise LengthError(f"{path}: header truncated ({len(buf)} bytes)")
    magic, version, channels, samples, rate = _ECGB_HEADER.unpack_from(buf, 0)
    if magic != ECGB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != ECGB_VERSION:
        raise FormatError(f"{path}: unsupported ECGB version {version}")
    expected = channels * samples * 4
    payload = len(buf) - _ECGB_HEADER.size
    if payload < expected:
        raise LengthError(f"{path}: payload has {payload} bytes, header announces {expected}")
    signal = np.frombuffer(buf, dtype="<f4", count=channels * samples, offset=_ECGB_HEADER.size)
    return EcgRecord(
        id=record_id or os.path.splitext(os.path.basename(path))[0],
        signal=signal.reshape(channels, samples).astype(np.float32),
        sample_rate_hz=rate,
        labels=labels if labels is not None else np.zeros(0, dtype=np.int8),
    )


# =============================================================================
# Preprocessing
# =============================================================================
def preprocess(rec: EcgRecord, target_hz: int = 100, target_seconds: int = 10) -> np.ndarray:
    """
    Mean-decimate to target_hz, then crop to the first target window or
    right-pad with zeros. Output is always (C_lead, target_hz * target_seconds).
    """
    signal = rec.signal
    rate = int(rec.sample_rate_hz)
    if rate != target_hz:
        if rate < target_hz or rate % target_hz:
            raise UnsupportedRateError(
                f"record {rec.id}: cannot decimate {rate} Hz to {target_hz} Hz by an integer factor"
            )
        factor = rate // target_hz
        usable = (signal.shape[1] // factor) * factor
        signal = signal[:, :usable].astype(np.float64).reshape(signal.shape[0], -1, factor).mean(axis=2)

    target = target_hz * target_seconds
    out = np.zeros((signal.shape[0], target), dtype=np.float32)
    keep = min(target, signal.shape[1])
    out[:, :keep] = signal[:, :keep]
    return out


# =============================================================================
# Manifest and taxonomy
# =============================================================================
def read_taxonomy(path: str) -> List[str]:
    with open(path, "r", encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]


def write_taxonomy(path: str, class_names: Sequence[str]):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(class_names) + "\n")


def read_manifest(path: str) -> pd.DataFrame:
    if not os.path.exists(path):
        raise FileNotFoundError(f"No manifest at {path}")
    df = pd.read_csv(path, dtype={"id": str, "path": str, "labels": str}, keep_default_na=False)
    missing = {"id", "path", "labels"} - set(df.columns)
    if missing:
        raise FormatError(f"{path}: manifest lacks columns {sorted(missing)}")
    if df["id"].duplicated().any():
        dupes = df.loc[df["id"].duplicated(), "id"].tolist()
        raise FormatError(f"{path}: duplicate record ids {dupes[:5]}")
    if "split" in df.columns:
        df["split"] = pd.to_numeric(df["split"], errors="coerce").astype("Int64")
    return df


def write_manifest(df: pd.DataFrame, path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    df.to_csv(path, index=False, columns=[c for c in MANIFEST_COLUMNS if c in df.columns])


def labels_to_multihot(labels: str, class_names: Sequence[str]) -> np.ndarray:
    """'MI;STTC' -> multi-hot vector over class_names."""
    index = {name: k for k, name in enumerate(class_names)}
    out = np.zeros(len(class_names), dtype=np.int8)
    for name in (part.strip() for part in str(labels).split(";")):
        if not name:
            continue
        if name not in index:
            raise FormatError(f"label '{name}' is not in the taxonomy {list(class_names)}")
        out[index[name]] = 1
    return out


def multihot_to_labels(vector: np.ndarray, class_names: Sequence[str]) -> str:
    return ";".join(class_names[k] for k in np.flatnonzero(vector))


# =============================================================================
# Stratified splitting
# =============================================================================
def stratified_split(
    manifest: pd.DataFrame,
    class_names: Sequence[str],
    n_folds: int = 10,
    seed: int = 0,
) -> pd.Series:
    """
    Fold id (1..n_folds) per record, indexed like the manifest.

    A fully populated `split` column is returned as is. Otherwise classes are
    visited rarest first; each unassigned positive goes to the fold holding
    the fewest positives of that class (ties: fewest records, then lowest id).
    """
    if "split" in manifest.columns and manifest["split"].notna().all() and len(manifest):
        logger.info("[DATA] Using the pre-assigned split column")
        return manifest["split"].astype(int)

    labels = np.stack([labels_to_multihot(s, class_names) for s in manifest["labels"]]) \
        if len(manifest) else np.zeros((0, len(class_names)), dtype=np.int8)
    rng = np.random.default_rng(seed)
    n = labels.shape[0]
    folds = np.zeros(n, dtype=np.int64)
    fold_pos = np.zeros((n_folds, labels.shape[1]), dtype=np.int64)
    fold_size = np.zeros(n_folds, dtype=np.int64)

    positives = labels.sum(axis=0)
    for k in np.argsort(positives, kind="stable"):
        if 0 < positives[k] < n_folds:
            logger.warning(
                f"[DATA] Class {class_names[k]} has {positives[k]} positives for {n_folds} folds; "
                f"balance is best-effort"
            )
        candidates = np.flatnonzero((labels[:, k] == 1) & (folds == 0))
        for i in rng.permutation(candidates):
            order = np.lexsort((np.arange(n_folds), fold_size, fold_pos[:, k]))
            f = order[0]
            folds[i] = f + 1
            fold_pos[f] += labels[i]
            fold_size[f] += 1

    for i in rng.permutation(np.flatnonzero(folds == 0)):
        f = int(np.argmin(fold_size))
        folds[i] = f + 1
        fold_size[f] += 1
    return pd.Series(folds, index=manifest.index, name="split")


# =============================================================================
# Synthetic ECG-like data
# =============================================================================
def _pink_noise(rng: np.random.Generator, leads: int, length: int) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal((leads, length)), axis=1)
    freqs = np.arange(spectrum.shape[1], dtype=np.float64)
    freqs[0] = 1.0
    noise = np.fft.irfft(spectrum / np.sqrt(freqs), n=length, axis=1)
    return noise / (noise.std(axis=1, keepdims=True) + 1e-12)


def class_signature(k: int, n_classes: int, leads: int, length: int, sample_rate_hz: int) -> np.ndarray:
    """Class-specific sinusoid plus a Gaussian transient at a class-specific phase."""
    t = np.arange(length, dtype=np.float64) / sample_rate_hz
    freq = 1.0 + 1.5 * k
    wave = np.sin(2.0 * np.pi * freq * t)
    center = (k + 1) / (n_classes + 1) * length
    width = max(length / 100.0, 1.0)
    transient = 2.0 * np.exp(-0.5 * ((np.arange(length) - center) / width) ** 2)
    gains = 0.5 + 0.5 * (np.arange(leads) + 1) / leads
    return gains[:, None] * (wave + transient)[None, :]


def synth_dataset(
    out_dir: str,
    n_records: int,
    n_classes: int,
    n_leads: int = 12,
    length: int = 1000,
    seed: int = 0,
    sample_rate_hz: int = 100,
    snr: float = 1.0,
    co_occurrence: float = 0.2,
    n_folds: int = 10,
    class_names: Optional[Sequence[str]] = None,
) -> pd.DataFrame:
    """
    Write a deterministic synthetic dataset (ECGB records, classes.txt,
    manifest.csv with stratified folds) under out_dir and return the manifest.
    Record i carries class i mod n_classes plus each other class with
    probability co_occurrence. class_names (e.g. a bundled taxonomy) replaces
    the generic C0..C{n-1} names and must have n_classes entries.
    """
    if n_records < n_classes:
        raise ConfigError(f"need n_records >= n_classes, got {n_records} < {n_classes}")
    if not 0.0 <= co_occurrence <= 1.0:
        raise ConfigError(f"co_occurrence must lie in [0, 1], got {co_occurrence}")
    rng = np.random.default_rng(seed)
    if class_names is None:
        class_names = [f"C{k}" for k in range(n_classes)]
    elif len(class_names) != n_classes:
        raise ConfigError(f"taxonomy has {len(class_names)} classes, n_classes is {n_classes}")
    class_names = list(class_names)
    signatures = [class_signature(k, n_classes, n_leads, length, sample_rate_hz) for k in range(n_classes)]

    rows = []
    for i in range(n_records):
        labels = (rng.random(n_classes) < co_occurrence).astype(np.int8)
        labels[i % n_classes] = 1
        signal = _pink_noise(rng, n_leads, length)
        for k in np.flatnonzero(labels):
            signal += snr * signatures[k]
        record_id = f"rec{i:05d}"
        rel_path = os.path.join(RECORDS_DIR, f"{record_id}.ecgb")
        write_record(os.path.join(out_dir, rel_path), EcgRecord(record_id, signal, sample_rate_hz, labels))
        rows.append({"id": record_id, "path": rel_path, "labels": multihot_to_labels(labels, class_names)})

    manifest = pd.DataFrame(rows, columns=["id", "path", "labels"])
    manifest["split"] = stratified_split(manifest, class_names, n_folds, seed).values
    write_taxonomy(os.path.join(out_dir, TAXONOMY_FILE), class_names)
    write_manifest(manifest, os.path.join(out_dir, MANIFEST_FILE))
    logger.info(f"[DATA] Wrote {n_records} synthetic records ({n_classes} classes, snr={snr}) to {out_dir}")
    return manifest


# =============================================================================
# In-memory dataset
# =============================================================================
@dataclass
class EcgDataset:
    ids: List[str]
    signals: np.ndarray      # (n, C_lead, T) float32
    labels: np.ndarray       # (n, n_classes) int8
    folds: np.ndarray        # (n,) fold ids
    class_names: List[str]

    def __len__(self) -> int:
        return len(self.ids)

    def select(self, mask: np.ndarray) -> "EcgDataset":
        idx = np.flatnonzero(mask)
        return EcgDataset(
            ids=[self.ids[i] for i in idx],
            signals=self.signals[idx],
            labels=self.labels[idx],
            folds=self.folds[idx],
            class_names=list(self.class_names),
        )

    def subset(self, folds: Sequence[int]) -> "EcgDataset":
        return self.select(np.isin(self.folds, list(folds)))

    def batches(
        self,
        batch_size: int,
        rng: Optional[np.random.Generator] = None,
    ) -> Iterator[Tuple[List[str], np.ndarray, np.ndarray]]:
        """(ids, signals, labels) batches; a seeded permutation when rng is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            yield [self.ids[i] for i in idx], self.signals[idx], self.labels[idx]


class DataHandler:
    """
    Loads a manifest-described dataset directory:

        <dataset_dir>/manifest.csv    id, path, labels, split
        <dataset_dir>/classes.txt     one class name per line
        <dataset_dir>/records/*.ecgb

    and serves preprocessed train / validation / test splits.
    """

    def __init__(self, config: DataConfig, dataset_dir: Optional[str] = None):
        self.config = config
        self.dataset_dir = dataset_dir or config.dataset_dir

    def class_names(self, manifest: pd.DataFrame) -> List[str]:
        path = os.path.join(self.dataset_dir, TAXONOMY_FILE)
        if os.path.exists(path):
            return read_taxonomy(path)
        names = sorted({p.strip() for s in manifest["labels"] for p in str(s).split(";") if p.strip()})
        logger.warning(f"[DATA] No {TAXONOMY_FILE}; taxonomy inferred from labels: {names}")
        return names

    def load(self) -> EcgDataset:
        manifest = read_manifest(os.path.join(self.dataset_dir, MANIFEST_FILE))
        class_names = self.class_names(manifest)
        folds = stratified_split(manifest, class_names, self.config.n_folds, self.config.split_seed)

        ids, signals, labels, fold_ids = [], [], [], []
        skipped = 0
        for row, fold in zip(manifest.itertuples(index=False), folds):
            multihot = labels_to_multihot(row.labels, class_names)
            if not multihot.any() and self.config.skip_unlabeled:
                skipped += 1
                continue
            path = row.path if os.path.isabs(row.path) else os.path.join(self.dataset_dir, row.path)
            rec = load_record(path, row.id, multihot)
            signals.append(preprocess(rec, self.config.target_hz, self.config.target_seconds))
            ids.append(row.id)
            labels.append(multihot)
            fold_ids.append(int(fold))

        if skipped:
            logger.warning(f"[DATA] Skipped {skipped} records with all-zero labels")
        if not ids:
            raise ConfigError(f"dataset at {self.dataset_dir} has no usable records")
        leads = {s.shape[0] for s in signals}
        if len(leads) != 1:
            raise FormatError(f"records disagree on lead count: {sorted(leads)}")

        logger.info(f"[DATA] Loaded {len(ids)} records x {signals[0].shape} from {self.dataset_dir}")
        return EcgDataset(
            ids=ids,
            signals=np.stack(signals),
            labels=np.stack(labels),
            folds=np.asarray(fold_ids, dtype=np.int64),
            class_names=class_names,
        )

    def splits(self, ds: EcgDataset) -> Tuple[EcgDataset, EcgDataset, EcgDataset]:
        train = ds.subset(self.config.train_folds)
        val = ds.subset(self.config.val_folds)
        test = ds.subset(self.config.test_folds)
        for name, part, folds in (("train", train, self.config.train_folds), ("validation", val, self.config.val_folds)):
            if len(part) == 0:
                raise ConfigError(f"{name} split is empty (folds {folds})")
        logger.info(f"[DATA] Split sizes: train={len(train)} val={len(val)} test={len(test)}")
        return train, val, test
