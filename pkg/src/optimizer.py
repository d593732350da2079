"""
AdamW with decoupled weight decay, the warmup learning-rate schedule and
global-norm gradient clipping.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from src.config import TrainConfig
from src.errors import DimensionError, TrainingDivergedError
from src.tensor_core import Tensor
from src.utils import checked_mode

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """First/second moments keyed by parameter position, plus the step counter."""
    lr_peak: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def from_config(cfg: TrainConfig) -> "OptimizerState":
        return OptimizerState(
            lr_peak=cfg.lr_peak,
            betas=tuple(cfg.betas),
            eps=cfg.adam_eps,
            weight_decay=cfg.weight_decay,
        )


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: OptimizerState,
    lr: float,
) -> OptimizerState:
    """
    One in-place AdamW update.

        m ← β1 m + (1 − β1) g,   v ← β2 v + (1 − β2) g²
        α_t = lr · sqrt(1 − β2^t) / (1 − β1^t)
        p ← p − lr·λ·p − α_t · m / (sqrt(v) + eps)

    Decay acts on the weights directly, never through the moments.
    """
    if len(params) != len(grads):
        raise DimensionError(f"adamw_step: {len(params)} params but {len(grads)} grads")
    if checked_mode():
        for i, g in enumerate(grads):
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError(f"[OPTIM] non-finite gradient for parameter {i} at step {state.step}")

    beta1, beta2 = state.betas
    state.step += 1
    step_size = lr * math.sqrt(1.0 - beta2 ** state.step) / (1.0 - beta1 ** state.step)

    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise DimensionError(f"adamw_step: grad {g.shape} does not match parameter {p.shape}")
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = m / (np.sqrt(v) + state.eps)
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
        p.data -= (step_size * update).astype(p.dtype, copy=False)
    return state


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState, lr: float) -> OptimizerState:
    """Plain Adam (L2-free); equals adamw_step with weight_decay = 0."""
    beta1, beta2 = state.betas
    state.step += 1
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.m.setdefault(i, np.zeros_like(p.data))
        v = state.v.setdefault(i, np.zeros_like(p.data))
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * g * g
        step_size = lr * math.sqrt(1.0 - beta2 ** state.step) / (1.0 - beta1 ** state.step)
        p.data -= step_size * (m / (np.sqrt(v) + state.eps))
    return state


def warmup_lr(step: int, cfg: TrainConfig, total_steps: int = 0) -> float:
    """
    Linear ramp 0 -> lr_peak over warmup_steps, then constant or cosine decay
    to zero at total_steps.
    """
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step <= cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    if cfg.schedule == "cosine" and total_steps > cfg.warmup_steps:
        progress = min(1.0, (step - cfg.warmup_steps) / (total_steps - cfg.warmup_steps))
        return 0.5 * cfg.lr_peak * (1.0 + math.cos(math.pi * progress))
    return cfg.lr_peak


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))


def clip_grad_norm(grads: List[np.ndarray], max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most max_norm (0 disables)."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm
