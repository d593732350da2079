"""
Selective state-space scan.

Discretization (exp(ΔA) with Euler or zero-order-hold input matrix), the
sequential recurrence h_t = Ā_t ⊙ h_{t-1} + B̄_t x_t, y_t = C_t · h_t, its
convolution-kernel form for time-invariant parameters, the bidirectional
composition used by the Mamba-based block, and a backward pass that either
caches the state trajectory or recomputes it.

Shapes: B batch, L length, D scan channels, N state size.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy.linalg import expm

from src.errors import DimensionError, DomainError, NonFiniteError
from src.tensor_core import (
    Tensor,
    add,
    conv1d,
    emit,
    exp,
    flip,
    matmul,
    mul,
    softplus,
    swish,
    transpose,
)
from src.utils import checked_mode

logger = logging.getLogger(__name__)

DISCRETIZATION_RULES = ("euler_b", "zoh_b")
SCAN_STRATEGIES = ("recompute", "cache_all")


# =============================================================================
# 1) Parameter containers
# =============================================================================
@dataclass
class SsmDirectionParams:
    """
    Learnable parameters of one scan direction.

    A is stored as a_log with A = -exp(a_log), so decoded entries are always
    strictly negative. Projections map x′ (.., ED) to B, C (.., N) and Δ (.., ED).
    """
    a_log: Tensor          # (ED, N)
    conv_weight: Tensor    # (ED, 1, K) depthwise
    conv_bias: Tensor      # (ED,)
    w_b: Tensor            # (ED, N)
    w_c: Tensor            # (ED, N)
    w_delta: Tensor        # (ED, ED)
    delta_bias: Tensor     # (ED,)

    @staticmethod
    def initialize(
        d_inner: int,
        d_state: int,
        kernel: int,
        rng: np.random.Generator,
        dtype=np.float64,
        dt_min: float = 1e-3,
        dt_max: float = 0.1,
    ) -> "SsmDirectionParams":
        """
        -A[d, n] = n + 1 for every channel; Δ bias is the inverse softplus of
        a log-uniform sample in [dt_min, dt_max]; other weights are uniform
        in ±1/sqrt(fan_in).
        """
        a_log = np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1)))
        dt = np.exp(rng.random(d_inner) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        dt = np.maximum(dt, 1e-4)
        inv_dt = dt + np.log(-np.expm1(-dt))

        def _uniform(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        def _param(value):
            return Tensor(np.asarray(value, dtype=dtype), requires_grad=True)

        return SsmDirectionParams(
            a_log=_param(a_log),
            conv_weight=_param(_uniform((d_inner, 1, kernel), kernel)),
            conv_bias=_param(_uniform((d_inner,), kernel)),
            w_b=_param(_uniform((d_inner, d_state), d_inner)),
            w_c=_param(_uniform((d_inner, d_state), d_inner)),
            w_delta=_param(_uniform((d_inner, d_inner), d_inner)),
            delta_bias=_param(inv_dt),
        )

    @property
    def kernel_size(self) -> int:
        return self.conv_weight.shape[-1]

    def decode_a(self) -> Tensor:
        return mul(exp(self.a_log), -1.0)


@dataclass
class DiscretizedParams:
    a_bar: Tensor   # (B, L, D, N)
    b_bar: Tensor   # (B, L, D, N)
    c: Tensor       # (B, L, N)


@dataclass
class ScanState:
    h: np.ndarray   # (B, D, N)


@dataclass
class ScanMemory:
    """Byte accounting of the (B, L, D, N) state trajectory for one scan."""
    strategy: str = "recompute"
    recorded_state_bytes: int = 0
    peak_backward_state_bytes: int = 0


# =============================================================================
# 2) Discretization formulas (shared by the materialized and fused paths)
# =============================================================================
def _check_rule(rule: str):
    if rule not in DISCRETIZATION_RULES:
        raise DomainError(f"unknown discretization rule '{rule}', expected one of {DISCRETIZATION_RULES}")


def _discretize_values(delta: np.ndarray, a: np.ndarray, b_in: np.ndarray, rule: str):
    """delta (.., D), a (D, N), b_in (.., N) -> a_bar, b_bar (.., D, N)"""
    a_bar = np.exp(delta[..., None] * a)
    if rule == "euler_b":
        b_bar = delta[..., None] * b_in[..., None, :]
    else:
        b_bar = (a_bar - 1.0) / a * b_in[..., None, :]
    return a_bar, b_bar


def _a_bar_grads(delta, a, a_bar, g):
    t = g * a_bar
    g_delta = (t * a).sum(axis=-1)
    g_a = (t * delta[..., None]).reshape(-1, *a.shape).sum(axis=0)
    return g_delta, g_a


def _b_bar_grads(delta, a, b_in, a_bar, g, rule):
    bb = b_in[..., None, :]
    if rule == "euler_b":
        g_delta = (g * bb).sum(axis=-1)
        g_a = np.zeros_like(a)
        g_bin = (g * delta[..., None]).sum(axis=-2)
    else:
        g_delta = (g * a_bar * bb).sum(axis=-1)
        dfa = (delta[..., None] * a_bar * a - (a_bar - 1.0)) / (a * a)
        g_a = (g * bb * dfa).reshape(-1, *a.shape).sum(axis=0)
        g_bin = (g * (a_bar - 1.0) / a).sum(axis=-2)
    return g_delta, g_a, g_bin


def _check_delta(delta: np.ndarray):
    if checked_mode() and not np.all(delta > 0):
        raise DomainError("discretize: delta must be > 0 elementwise")


def discretize(
    delta: Tensor,
    a: Tensor,
    b_in: Tensor,
    rule: str = "euler_b",
    c: Optional[Tensor] = None,
) -> DiscretizedParams:
    """
    Ā = exp(ΔA); B̄ = Δ·B (euler_b) or (exp(ΔA) − 1)/A · B (zoh_b).

    delta (B, L, D), a (D, N), b_in (B, L, N). Materializes (B, L, D, N)
    tensors; the model path uses fused_selective_scan instead.
    """
    _check_rule(rule)
    if delta.ndim != 3 or a.ndim != 2 or b_in.ndim != 3 or delta.shape[-1] != a.shape[0] \
            or b_in.shape[:2] != delta.shape[:2] or b_in.shape[-1] != a.shape[1]:
        raise DimensionError(f"discretize: delta {delta.shape}, A {a.shape}, B {b_in.shape} are inconsistent")
    _check_delta(delta.data)

    a_bar, b_bar = _discretize_values(delta.data, a.data, b_in.data, rule)
    size = a_bar.size

    def _a_backward(g):
        return _a_bar_grads(delta.data, a.data, a_bar, g)

    def _b_backward(g):
        return _b_bar_grads(delta.data, a.data, b_in.data, a_bar, g, rule)

    a_bar_t = emit(
        "discretize_a", (delta, a), a_bar, _a_backward,
        lambda dd, ad: np.exp(dd[..., None] * ad), flops=2 * size,
    )
    b_bar_t = emit(
        "discretize_b", (delta, a, b_in), b_bar, _b_backward,
        lambda dd, ad, bd: _discretize_values(dd, ad, bd, rule)[1],
        flops=(1 if rule == "euler_b" else 4) * size,
    )
    if c is None:
        c = Tensor(np.zeros(b_in.shape, dtype=b_in.dtype))
    return DiscretizedParams(a_bar=a_bar_t, b_bar=b_bar_t, c=c)


# =============================================================================
# 3) Scan core (numpy)
# =============================================================================
StepFn = Callable[[int], Tuple[np.ndarray, np.ndarray]]


def _scan_forward(
    step: StepFn,
    x: np.ndarray,
    c: np.ndarray,
    h0: Optional[np.ndarray] = None,
    start: int = 0,
    stop: Optional[int] = None,
    keep_states: bool = False,
    checkpoint_every: int = 0,
):
    """
    Run the recurrence over t in [start, stop).

    Returns (y, h_last, states, checkpoints): y (B, stop-start, D); states
    (stop-start, B, D, N) when keep_states; checkpoints {t: h_t} for every t
    with (t + 1) % checkpoint_every == 0.
    """
    batch, length, d = x.shape
    n = c.shape[-1]
    stop = length if stop is None else stop
    h = np.zeros((batch, d, n), dtype=x.dtype) if h0 is None else h0
    y = np.empty((batch, stop - start, d), dtype=x.dtype)
    states = np.empty((stop - start, batch, d, n), dtype=x.dtype) if keep_states else None
    checkpoints: Dict[int, np.ndarray] = {}
    checked = checked_mode()
    for t in range(start, stop):
        a_t, b_t = step(t)
        h = a_t * h + b_t * x[:, t, :, None]
        if checked and not np.all(np.isfinite(h)):
            raise NonFiniteError(f"[SCAN] non-finite hidden state at step {t}")
        y[:, t - start] = np.einsum("bdn,bn->bd", h, c[:, t])
        if keep_states:
            states[t - start] = h
        if checkpoint_every and (t + 1) % checkpoint_every == 0:
            checkpoints[t] = h
    return y, h, states, checkpoints


def _scan_backward(
    step: StepFn,
    x: np.ndarray,
    c: np.ndarray,
    dy: np.ndarray,
    strategy: str,
    cached_states: Optional[np.ndarray],
    on_step: Callable[[int, np.ndarray, np.ndarray, np.ndarray], None],
    memory: Optional[ScanMemory] = None,
):
    """
    Reverse pass of the recurrence.

    on_step(t, g_a_bar_t, g_b_bar_t, a_bar_t) receives the per-step
    parameter gradients. Under "recompute" the state trajectory is rebuilt
    chunk by chunk (chunks of ceil(sqrt(L)) steps) from checkpoints taken in
    a fresh forward pass; under "cache_all" the stored trajectory is used.
    Returns (g_x, g_c).
    """
    batch, length, d = x.shape
    n = c.shape[-1]
    state_bytes = batch * d * n * x.dtype.itemsize

    if strategy == "cache_all":
        chunks = [(0, length)]
        checkpoints: Dict[int, np.ndarray] = {}
        peak = cached_states.nbytes
    else:
        chunk = math.isqrt(max(length - 1, 0)) + 1
        chunks = [(s, min(s + chunk, length)) for s in range(0, length, chunk)]
        _, _, _, checkpoints = _scan_forward(step, x, c, checkpoint_every=chunk)
        peak = (len(checkpoints) + chunk) * state_bytes
        logger.debug(f"[SCAN] recompute backward L={length} chunk={chunk} checkpoints={len(checkpoints)} peak={peak:,}B")
    if memory is not None:
        memory.peak_backward_state_bytes = max(memory.peak_backward_state_bytes, peak)

    g_x = np.zeros_like(x)
    g_c = np.zeros_like(c)
    dh = np.zeros((batch, d, n), dtype=x.dtype)
    zeros = np.zeros((batch, d, n), dtype=x.dtype)

    for start, stop in reversed(chunks):
        h_before = checkpoints.get(start - 1, zeros)
        if strategy == "cache_all":
            states = cached_states
        else:
            _, _, states, _ = _scan_forward(step, x, c, h0=h_before, start=start, stop=stop, keep_states=True)
        for t in range(stop - 1, start - 1, -1):
            a_t, b_t = step(t)
            h_t = states[t - start]
            h_prev = states[t - start - 1] if t > start else h_before
            dh = dh + dy[:, t, :, None] * c[:, t, None, :]
            g_c[:, t] = np.einsum("bd,bdn->bn", dy[:, t], h_t)
            g_x[:, t] = np.einsum("bdn,bdn->bd", dh, b_t)
            on_step(t, dh * h_prev, dh * x[:, t, :, None], a_t)
            dh = dh * a_t
    return g_x, g_c


def _check_strategy(strategy: str):
    if strategy not in SCAN_STRATEGIES:
        raise DomainError(f"unknown scan strategy '{strategy}', expected one of {SCAN_STRATEGIES}")


def _scan_emit(op, inputs, step_for, x, c, strategy, forward_fn, backward_rest, flops, memory):
    """Shared forward + tape recording for both scan flavours."""
    step = step_for(*(t.data for t in inputs))
    keep = strategy == "cache_all"
    y, h_last, states, _ = _scan_forward(step, x.data, c.data, keep_states=keep)
    recorded = states.nbytes if keep else h_last.nbytes
    if memory is not None:
        memory.strategy = strategy
        memory.recorded_state_bytes += recorded
    final_state = ScanState(h=h_last)

    def _backward(g):
        return backward_rest(g, step, states, final_state)

    out = emit(
        op, inputs, y, _backward, forward_fn, flops=flops,
        recompute=not keep, saved_bytes={"scan_states": recorded},
    )
    return out


def selective_scan(
    p: DiscretizedParams,
    x: Tensor,
    strategy: str = "recompute",
    memory: Optional[ScanMemory] = None,
) -> Tensor:
    """
    h_t = Ā_t ⊙ h_{t−1} + B̄_t x_t (h_0 = 0), y_t[d] = Σ_n C_t[n] h_t[d, n].

    x (B, L, D) -> y (B, L, D). Sequential in t.
    """
    _check_strategy(strategy)
    a_bar, b_bar, c = p.a_bar, p.b_bar, p.c
    batch, length, d = x.shape
    if a_bar.shape[:3] != (batch, length, d) or b_bar.shape != a_bar.shape \
            or c.shape != (batch, length, a_bar.shape[-1]):
        raise DimensionError(
            f"selective_scan: A_bar {a_bar.shape}, B_bar {b_bar.shape}, C {c.shape}, x {x.shape} are inconsistent"
        )

    def _step_for(ad, bd, *_):
        return lambda t: (ad[:, t], bd[:, t])

    def _forward(ad, bd, cd, xd):
        return _scan_forward(_step_for(ad, bd), xd, cd)[0]

    def _backward(g, step, states, _final):
        g_abar = np.zeros_like(a_bar.data)
        g_bbar = np.zeros_like(b_bar.data)

        def _on_step(t, ga, gb, _a):
            g_abar[:, t] = ga
            g_bbar[:, t] = gb

        g_x, g_c = _scan_backward(step, x.data, c.data, g, strategy, states, _on_step, memory)
        return g_abar, g_bbar, g_c, g_x

    return _scan_emit(
        "selective_scan", (a_bar, b_bar, c, x), _step_for, x, c, strategy,
        _forward, _backward, 3 * a_bar.size, memory,
    )


def fused_selective_scan(
    delta: Tensor,
    a: Tensor,
    b_in: Tensor,
    c: Tensor,
    x: Tensor,
    rule: str = "euler_b",
    strategy: str = "recompute",
    memory: Optional[ScanMemory] = None,
) -> Tensor:
    """
    discretize + selective_scan without materializing (B, L, D, N) tensors:
    Ā_t, B̄_t are produced per step from Δ_t, A, B_t (and again in backward).
    """
    _check_rule(rule)
    _check_strategy(strategy)
    batch, length, d = x.shape
    n = a.shape[-1]
    if delta.shape != x.shape or a.shape != (d, n) or b_in.shape != (batch, length, n) or c.shape != b_in.shape:
        raise DimensionError(
            f"fused_selective_scan: delta {delta.shape}, A {a.shape}, B {b_in.shape}, C {c.shape}, x {x.shape}"
        )
    _check_delta(delta.data)

    def _step_for(dd, ad, bd, *_):
        return lambda t: _discretize_values(dd[:, t], ad, bd[:, t], rule)

    def _forward(dd, ad, bd, cd, xd):
        return _scan_forward(_step_for(dd, ad, bd), xd, cd)[0]

    def _backward(g, step, states, _final):
        g_delta = np.zeros_like(delta.data)
        g_bin = np.zeros_like(b_in.data)
        g_a = np.zeros_like(a.data)

        def _on_step(t, ga, gb, a_bar_t):
            dt = delta.data[:, t]
            gd_a, ga_a = _a_bar_grads(dt, a.data, a_bar_t, ga)
            gd_b, ga_b, gbin = _b_bar_grads(dt, a.data, b_in.data[:, t], a_bar_t, gb, rule)
            g_delta[:, t] = gd_a + gd_b
            g_bin[:, t] = gbin
            g_a[...] += ga_a + ga_b

        g_x, g_c = _scan_backward(step, x.data, c.data, g, strategy, states, _on_step, memory)
        return g_delta, g_a, g_bin, g_c, g_x

    size = batch * length * d * n
    return _scan_emit(
        "fused_selective_scan", (delta, a, b_in, c, x), _step_for, x, c, strategy,
        _forward, _backward, 6 * size, memory,
    )


def reverse_selective_scan(p: DiscretizedParams, x: Tensor, strategy: str = "recompute") -> Tensor:
    """reverse_L ∘ selective_scan ∘ reverse_L over already-discretized parameters."""
    flipped = DiscretizedParams(a_bar=flip(p.a_bar, 1), b_bar=flip(p.b_bar, 1), c=flip(p.c, 1))
    return flip(selective_scan(flipped, flip(x, 1), strategy), 1)


# =============================================================================
# 4) Direction path and bidirectional composition
# =============================================================================
def direction_scan(
    p: SsmDirectionParams,
    x: Tensor,
    rule: str = "euler_b",
    strategy: str = "recompute",
    memory: Optional[ScanMemory] = None,
) -> Tensor:
    """
    One direction of the block on x (B, L, ED):
    x′ = swish(causal depthwise conv(x)); B, C, Δ from x′; selective scan of x′.
    """
    d_inner = x.shape[-1]
    xc = transpose(x, (0, 2, 1))
    xc = conv1d(xc, p.conv_weight, p.conv_bias, stride=1, padding="causal_left", groups=d_inner)
    x_prime = swish(transpose(xc, (0, 2, 1)))
    b_in = matmul(x_prime, p.w_b)
    c = matmul(x_prime, p.w_c)
    delta = softplus(add(matmul(x_prime, p.w_delta), p.delta_bias))
    return fused_selective_scan(delta, p.decode_a(), b_in, c, x_prime, rule, strategy, memory)


def bidirectional_scan(
    p_fwd: SsmDirectionParams,
    p_bwd: SsmDirectionParams,
    x_fwd: Tensor,
    x_bwd: Optional[Tensor] = None,
    rule: str = "euler_b",
    strategy: str = "recompute",
    memory: Optional[ScanMemory] = None,
) -> Tuple[Tensor, Tensor]:
    """
    Forward branch scans x_fwd as given; the backward branch scans the
    time-reversed x_bwd (defaults to x_fwd) with its own parameters and
    reverses its output back. Both outputs are (B, L, ED).
    """
    if x_bwd is None:
        x_bwd = x_fwd
    y_fwd = direction_scan(p_fwd, x_fwd, rule, strategy, memory)
    y_bwd = flip(direction_scan(p_bwd, flip(x_bwd, 1), rule, strategy, memory), 1)
    return y_fwd, y_bwd


# =============================================================================
# 5) Convolution form and oracles
# =============================================================================
def _array(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)


def ssm_conv_kernel(a_bar, b_bar, c, length: int) -> Tensor:
    """
    K̄[d, j] = Σ_n C[n] Ā[d, n]^j B̄[d, n] for j = 0..L−1, time-invariant
    a_bar (D, N), b_bar (D, N), c (N,). Returns (D, L).
    """
    a_bar, b_bar, c = _array(a_bar), _array(b_bar), _array(c)
    if a_bar.shape != b_bar.shape or a_bar.shape[-1] != c.shape[-1]:
        raise DimensionError(f"ssm_conv_kernel: A_bar {a_bar.shape}, B_bar {b_bar.shape}, C {c.shape}")
    powers = a_bar[:, :, None] ** np.arange(length)
    return Tensor(np.einsum("n,dnl,dn->dl", c, powers, b_bar))


def causal_conv(x, kernel) -> Tensor:
    """y[b, t, d] = Σ_{j ≤ t} K[d, j] x[b, t − j, d] for x (B, L, D), K (D, L)."""
    x, kernel = _array(x), _array(kernel)
    length = x.shape[1]
    lag = np.arange(length)[:, None] - np.arange(length)[None, :]
    toeplitz = np.where(lag >= 0, kernel[:, np.clip(lag, 0, None)], 0.0)
    return Tensor(np.einsum("dts,bsd->btd", toeplitz, x))


def dense_zoh(a: np.ndarray, b: np.ndarray, delta: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Zero-order hold of the dense continuous system h′ = Ah + Bx:
    Ā = exp(ΔA), B̄ = (ΔA)^{-1}(exp(ΔA) − I) ΔB.
    """
    a = np.asarray(a, dtype=np.float64)
    a_bar = expm(delta * a)
    b_bar = np.linalg.solve(delta * a, (a_bar - np.eye(a.shape[0])) @ (delta * np.asarray(b)))
    return a_bar, b_bar


def geometric_bound(a_bar: np.ndarray, b_bar: np.ndarray, c: np.ndarray, x_sup: float) -> float:
    """Σ|C|·max|B̄|·sup|x| / (1 − max Ā), an upper bound on |y| for Ā in (0, 1)."""
    return float(np.abs(c).max(axis=tuple(range(c.ndim - 1))).sum()
                 * np.abs(b_bar).max() * x_sup / (1.0 - np.max(a_bar)))
