import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import rankdata

from src.errors import DimensionError, MetricUndefinedError
from src.tensor_core import Tensor
from src.utils import ensure_parent, write_canonical_json

logger = logging.getLogger(__name__)

THRESHOLD = 0.5


def _as_2d(name: str, value) -> np.ndarray:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be (B, C), got shape {arr.shape}")
    return arr


def _pair(a_name, a, b_name, b):
    a, b = _as_2d(a_name, a), _as_2d(b_name, b)
    if a.shape != b.shape:
        raise DimensionError(f"{a_name} {a.shape} and {b_name} {b.shape} differ")
    return a, b


# =============================================================================
# 1) AUC
# =============================================================================
def auc_per_class(scores, labels) -> np.ndarray:
    """
    Rank-statistic AUC per class: P(s+ > s-) + ½ P(tie).
    Classes lacking positives or negatives get NaN.
    """
    scores, labels = _pair("scores", scores, "labels", labels)
    labels = labels.astype(bool)
    out = np.full(scores.shape[1], np.nan)
    for k in range(scores.shape[1]):
        pos = int(labels[:, k].sum())
        neg = labels.shape[0] - pos
        if pos == 0 or neg == 0:
            continue
        ranks = rankdata(scores[:, k].astype(np.float64))
        out[k] = (ranks[labels[:, k]].sum() - pos * (pos + 1) / 2.0) / (pos * neg)
    return out


def auc_macro(scores, labels, class_names: Optional[Sequence[str]] = None) -> float:
    """Unweighted mean of per-class AUC over the classes where it is defined."""
    per_class = auc_per_class(scores, labels)
    valid = ~np.isnan(per_class)
    if not valid.any():
        raise MetricUndefinedError("macro-AUC undefined: no class has both positives and negatives")
    if not valid.all():
        names = class_names or [str(k) for k in range(per_class.size)]
        excluded = [names[k] for k in np.flatnonzero(~valid)]
        logger.info(f"[METRICS] Excluded from macro-AUC (single-valued labels): {excluded}")
    return float(per_class[valid].mean())


# =============================================================================
# 2) F1 / accuracy
# =============================================================================
def binarize(probs, threshold: float = THRESHOLD) -> np.ndarray:
    probs = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return (probs > threshold).astype(np.int8)


def f1_per_class(pred, labels) -> np.ndarray:
    pred, labels = _pair("pred", pred, "labels", labels)
    pred, labels = pred.astype(bool), labels.astype(bool)
    tp = (pred & labels).sum(axis=0).astype(np.float64)
    fp = (pred & ~labels).sum(axis=0).astype(np.float64)
    fn = (~pred & labels).sum(axis=0).astype(np.float64)
    denom = 2 * tp + fp + fn
    # 2PR/(P+R) == 2TP/(2TP+FP+FN); 0/0 := 0
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def f1_macro(pred, labels) -> float:
    return float(f1_per_class(pred, labels).mean())


def accuracy(pred, labels, mode: str = "subset") -> float:
    pred, labels = _pair("pred", pred, "labels", labels)
    correct = pred.astype(bool) == labels.astype(bool)
    if mode == "subset":
        return float(correct.all(axis=1).mean())
    if mode == "per_label":
        return float(correct.mean())
    raise ValueError(f"unknown accuracy mode '{mode}', expected 'subset' or 'per_label'")


# =============================================================================
# 3) Report
# =============================================================================
@dataclass
class MetricsReport:
    auc_macro: Optional[float]
    f1_macro: float
    acc_subset: float
    acc_per_label: float
    n_samples: int
    per_class: List[dict] = field(default_factory=list)
    param_count: int = 0
    flop_count: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path: str):
        write_canonical_json(path, self.to_dict())

    def to_row(self) -> pd.DataFrame:
        """Flat one-row frame: headline metrics then per-class AUC/F1 columns."""
        row = {
            "auc_macro": self.auc_macro,
            "f1_macro": self.f1_macro,
            "acc_subset": self.acc_subset,
            "acc_per_label": self.acc_per_label,
            "n_samples": self.n_samples,
            "param_count": self.param_count,
            "flop_count": self.flop_count,
        }
        for entry in self.per_class:
            row[f"auc_{entry['class']}"] = entry["auc"]
            row[f"f1_{entry['class']}"] = entry["f1"]
        return pd.DataFrame([row])

    def write_csv(self, path: str):
        ensure_parent(path)
        self.to_row().to_csv(path, index=False)


def evaluate_predictions(
    logits,
    labels,
    class_names: Sequence[str],
    param_count: int = 0,
    flop_count: int = 0,
) -> MetricsReport:
    """Logits (B, C) -> sigmoid -> threshold 0.5 -> every metric."""
    logits, labels = _pair("logits", logits, "labels", labels)
    probs = expit(logits.astype(np.float64))
    pred = binarize(probs)

    try:
        auc = auc_macro(probs, labels, class_names)
    except MetricUndefinedError as e:
        logger.warning(f"[METRICS] {e}")
        auc = None
    aucs = auc_per_class(probs, labels)
    f1s = f1_per_class(pred, labels)
    support = labels.astype(bool).sum(axis=0)

    per_class = [
        {
            "class": name,
            "auc": None if np.isnan(aucs[k]) else float(aucs[k]),
            "f1": float(f1s[k]),
            "support": int(support[k]),
        }
        for k, name in enumerate(class_names)
        if support[k] > 0
    ]
    return MetricsReport(
        auc_macro=auc,
        f1_macro=float(f1s.mean()),
        acc_subset=accuracy(pred, labels, "subset"),
        acc_per_label=accuracy(pred, labels, "per_label"),
        n_samples=int(labels.shape[0]),
        per_class=per_class,
        param_count=int(param_count),
        flop_count=int(flop_count),
    )
