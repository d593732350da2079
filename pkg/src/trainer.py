"""
Training harness: multi-label loss, AdamW steps with warmup, epoch loop with
best-by-validation-AUC checkpointing, and a short divergence probe.
"""

import copy
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.config import TrainConfig
from src.data_handler import EcgDataset
from src.errors import ConfigError, DimensionError, DomainError, TrainingDivergedError
from src.metrics import MetricsReport, evaluate_predictions
from src.model import EcgMambaModel, count_params_flops, save_checkpoint
from src.optimizer import OptimizerState, adamw_step, clip_grad_norm, warmup_lr
from src.tensor_core import Tape, Tensor, bce_with_logits
from src.utils import ensure_parent

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "step", "lr", "train_loss", "val_auc", "val_f1", "val_acc"]
BEST_CHECKPOINT = "model.ckpt"
HISTORY_FILE = "history.csv"


def multilabel_loss(logits: Tensor, targets) -> Tensor:
    """Mean sigmoid BCE over B*C cells; targets must be 0/1."""
    targets = np.asarray(targets)
    if logits.shape != targets.shape:
        raise DimensionError(f"multilabel_loss: logits {logits.shape} vs targets {targets.shape}")
    if not np.isin(targets, (0, 1)).all():
        raise DomainError("multilabel_loss: targets must lie in {0, 1}")
    return bce_with_logits(logits, targets)


def predict_logits(model: EcgMambaModel, signals: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Inference-mode logits for a stack of preprocessed signals (no tape)."""
    was_training = model.training
    model.eval()
    try:
        out = [model.forward(signals[i:i + batch_size]).data for i in range(0, len(signals), batch_size)]
    finally:
        model.training = was_training
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.n_classes))


def embed_signals(model: EcgMambaModel, signals: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Pooled pre-head features (n, D) in inference mode."""
    was_training = model.training
    model.eval()
    try:
        out = [model.embed(signals[i:i + batch_size]).data for i in range(0, len(signals), batch_size)]
    finally:
        model.training = was_training
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.d_model))


class Trainer:
    """
    Owns the optimizer state and drives one model through training.

    With workers > 1 each batch is split into that many micro-batches whose
    forward/backward run in a thread pool (each thread records on its own
    tape); gradients are summed in micro-batch order and BatchNorm running
    statistics are committed in the same order by this coordinator.
    """

    def __init__(
        self,
        model: EcgMambaModel,
        cfg: TrainConfig,
        output_dir: str,
        class_names: Sequence[str],
        workers: int = 1,
    ):
        self.model = model
        self.cfg = cfg
        self.output_dir = output_dir
        self.class_names = list(class_names)
        self.workers = max(1, int(workers))
        self.params = model.parameters()
        self.state = OptimizerState.from_config(cfg)
        self.total_steps = 0
        self.history: List[dict] = []
        self.best_auc = -math.inf
        if len(self.class_names) != model.config.n_classes:
            raise ConfigError(
                f"model has {model.config.n_classes} outputs but the taxonomy has {len(self.class_names)} classes"
            )

    # -------------------------------------------------------------------------
    # Gradients
    # -------------------------------------------------------------------------
    def _micro_batch(self, x: np.ndarray, y: np.ndarray) -> Tuple[float, List[np.ndarray], list]:
        sink: list = []
        with Tape() as tape:
            loss = multilabel_loss(self.model.forward(x, stats_sink=sink), y)
        grads = tape.backward(loss, fill_leaves=False)
        return float(loss.data), [grads.get(p.id, np.zeros_like(p.data)) for p in self.params], sink

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray) -> Tuple[float, List[np.ndarray]]:
        """Mean loss over the batch and its gradient for every parameter."""
        if self.workers == 1 or len(x) < 2:
            loss, grads, sink = self._micro_batch(x, y)
            results = [(1.0, loss, grads, sink)]
        else:
            parts = [p for p in np.array_split(np.arange(len(x)), min(self.workers, len(x))) if len(p)]
            with ThreadPoolExecutor(max_workers=len(parts)) as pool:
                outs = list(pool.map(lambda idx: self._micro_batch(x[idx], y[idx]), parts))
            results = [(len(idx) / len(x), *out) for idx, out in zip(parts, outs)]

        total_loss = 0.0
        total_grads = [np.zeros_like(p.data) for p in self.params]
        for weight, loss, grads, sink in results:
            total_loss += weight * loss
            for acc, g in zip(total_grads, grads):
                acc += weight * g
            for bn, stats in sink:
                bn.commit(stats)
        return total_loss, total_grads

    # -------------------------------------------------------------------------
    # One optimizer step
    # -------------------------------------------------------------------------
    def train_step(self, x: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
        """Returns (loss, lr used)."""
        self.model.train()
        loss, grads = self.loss_and_grads(x, y)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            logger.error(f"[TRAIN] Non-finite loss/gradient at step {self.state.step}: loss={loss}")
            raise TrainingDivergedError(f"training diverged at step {self.state.step} (loss={loss})")
        clip_grad_norm(grads, self.cfg.grad_clip)
        lr = warmup_lr(self.state.step + 1, self.cfg, self.total_steps)
        adamw_step(self.params, grads, self.state, lr)
        return loss, lr

    # -------------------------------------------------------------------------
    # Evaluation
    # -------------------------------------------------------------------------
    def evaluate(self, ds: EcgDataset, with_counts: bool = False) -> MetricsReport:
        logits = predict_logits(self.model, ds.signals, self.cfg.batch_size)
        params = flops = 0
        if with_counts:
            params, flops = count_params_flops(self.model, (1,) + ds.signals.shape[1:])
        return evaluate_predictions(logits, ds.labels, self.class_names, params, flops)

    # -------------------------------------------------------------------------
    # Epoch loop
    # -------------------------------------------------------------------------
    def fit(self, train_ds: EcgDataset, val_ds: EcgDataset) -> pd.DataFrame:
        if len(train_ds) == 0:
            raise ConfigError("training split is empty")
        if len(val_ds) == 0:
            raise ConfigError("validation split is empty")

        rng = np.random.default_rng(self.cfg.seed)
        steps_per_epoch = math.ceil(len(train_ds) / self.cfg.batch_size)
        self.total_steps = steps_per_epoch * self.cfg.epochs
        logger.info(
            f"[TRAIN] {len(train_ds)} train / {len(val_ds)} val records, "
            f"{self.cfg.epochs} epochs x {steps_per_epoch} steps, workers={self.workers}"
        )

        for epoch in range(1, self.cfg.epochs + 1):
            losses, lr = [], 0.0
            for _, x, y in train_ds.batches(self.cfg.batch_size, rng):
                loss, lr = self.train_step(x, y)
                losses.append(loss * len(x))
            train_loss = float(np.sum(losses) / len(train_ds))

            report = self.evaluate(val_ds)
            val_auc = report.auc_macro if report.auc_macro is not None else float("nan")
            row = {
                "epoch": epoch,
                "step": self.state.step,
                "lr": lr,
                "train_loss": train_loss,
                "val_auc": val_auc,
                "val_f1": report.f1_macro,
                "val_acc": report.acc_subset,
            }
            self.history.append(row)
            logger.info(
                f"[TRAIN] epoch {epoch}/{self.cfg.epochs} step={self.state.step} lr={lr:.2e} "
                f"loss={train_loss:.6f} val_auc={val_auc:.4f} val_f1={report.f1_macro:.4f} "
                f"val_acc={report.acc_subset:.4f}"
            )

            score = val_auc if math.isfinite(val_auc) else -math.inf
            if score > self.best_auc or epoch == 1:
                self.best_auc = max(score, self.best_auc)
                save_checkpoint(
                    os.path.join(self.output_dir, BEST_CHECKPOINT), self.model, self.class_names,
                    extra={"epoch": epoch, "val_auc": row["val_auc"] if math.isfinite(val_auc) else None},
                )
                logger.info(f"[CKPT] Best checkpoint replaced at epoch {epoch} (val_auc={val_auc:.4f})")
            self.write_history()

        return pd.DataFrame(self.history, columns=HISTORY_COLUMNS)

    def write_history(self) -> str:
        path = os.path.join(self.output_dir, HISTORY_FILE)
        ensure_parent(path)
        pd.DataFrame(self.history, columns=HISTORY_COLUMNS).to_csv(path, index=False)
        return path

    # -------------------------------------------------------------------------
    # Divergence probe
    # -------------------------------------------------------------------------
    def overfit_probe(self, x: np.ndarray, y: np.ndarray, steps: int = 10, lr: Optional[float] = None) -> Tuple[bool, List[float]]:
        """
        Take `steps` AdamW steps on one fixed batch at a constant learning rate
        and report whether the loss strictly decreased at every step. Model
        weights, BatchNorm statistics and optimizer state are restored
        afterwards.
        """
        saved_params = [p.data.copy() for p in self.params]
        saved_buffers = [(bn.running_mean.copy(), bn.running_var.copy()) for _, bn in self.model.encoder.blocks]
        saved_state = copy.deepcopy(self.state)
        lr = self.cfg.lr_peak if lr is None else lr
        losses = []
        try:
            self.model.train()
            for i in range(steps + 1):
                loss, grads = self.loss_and_grads(x, y)
                losses.append(loss)
                if i == steps:
                    break
                clip_grad_norm(grads, self.cfg.grad_clip)
                adamw_step(self.params, grads, self.state, lr)
        finally:
            for p, data in zip(self.params, saved_params):
                p.data = data
            for (_, bn), (rm, rv) in zip(self.model.encoder.blocks, saved_buffers):
                bn.running_mean, bn.running_var = rm, rv
            self.state = saved_state

        decreased = all(b < a for a, b in zip(losses, losses[1:])) and all(math.isfinite(v) for v in losses)
        if not decreased:
            logger.warning(f"[TRAIN] Divergence probe: loss did not decrease strictly over {steps} steps: {losses}")
        return decreased, losses
