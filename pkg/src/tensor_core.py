"""
Dense tensor with reverse-mode gradients.

Tensors wrap a numpy array. Operations executed inside an active `Tape`
context are recorded in order (so the tape is topologically sorted by
construction) together with a backward rule and a replayable forward rule.

    with Tape() as tape:
        loss = sum_all(matmul(x, w))
    grads = backward(tape, loss)

Broadcasting is limited to one rule: the smaller operand's shape must be a
suffix of the larger one (bias over leading batch axes). Anything else is a
DimensionError.
"""

import itertools
import logging
import struct
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from src.errors import ContractError, DimensionError, DomainError, FormatError, LengthError, NonFiniteError
from src.utils import checked_mode

logger = logging.getLogger(__name__)

DTYPES = {"f64": np.float64, "f32": np.float32}
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODE_NATIVE = {0: np.float64, 1: np.float32}

TENSOR_MAGIC = b"TSR1"

ACTIVATIONS = ("relu", "sigmoid", "softplus", "swish")
CONV_PADDINGS = ("causal_left", "zero_symmetric", "none")

_ids = itertools.count(1)
_local = threading.local()


class Tensor:
    """
    Dense row-major array plus an optional gradient slot.

    Attributes:
        data:          numpy array (float64 or float32)
        requires_grad: whether the tape tracks gradients flowing into it
        grad:          filled by backward() for leaves
        id:            process-unique identifier used as the tape key
        name:          optional label (parameter path, checkpoint key)
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _DTYPE_CODES:
                dtype = data.dtype
            else:
                dtype = np.float64
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def to_bytes(self) -> bytes:
        return tensor_to_bytes(self)


# =============================================================================
# 1) Tape
# =============================================================================
@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    forward: Callable[..., np.ndarray]
    recompute: bool = False
    saved_bytes: Dict[str, int] = field(default_factory=dict)


class Tape:
    """
    Ordered record of differentiable operations.

    The active tape is thread-local, so each worker records on its own tape.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def record(self, entry: TapeEntry):
        self.entries.append(entry)

    def saved_bytes(self, category: Optional[str] = None) -> int:
        """Bytes held for backward, optionally restricted to one category."""
        total = 0
        for entry in self.entries:
            if category is None:
                total += sum(entry.saved_bytes.values())
            else:
                total += entry.saved_bytes.get(category, 0)
        return total

    def leaves(self) -> List[Tensor]:
        produced = {e.output.id for e in self.entries}
        seen = set()
        result = []
        for entry in self.entries:
            for t in entry.inputs:
                if t.requires_grad and t.id not in produced and t.id not in seen:
                    seen.add(t.id)
                    result.append(t)
        return result

    def backward(
        self, loss: Tensor, fill_leaves: bool = True, seed: Optional[np.ndarray] = None
    ) -> Dict[int, np.ndarray]:
        """
        Reverse accumulation from a scalar loss.

        Returns {leaf.id: gradient}. With fill_leaves, each leaf's .grad slot
        is overwritten with its gradient. seed replaces the unit gradient of
        the loss, which then may have any shape.
        """
        if seed is None and loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if seed is not None and seed.shape != loss.shape:
            raise DimensionError(f"backward() seed {seed.shape} does not match output {loss.shape}")
        if not loss.requires_grad:
            raise ContractError("loss is not connected to any tensor that requires grad")

        grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data) if seed is None else seed}
        for entry in reversed(self.entries):
            g = grads.pop(entry.output.id, None)
            if g is None:
                continue
            for t, gi in zip(entry.inputs, entry.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t.id in grads:
                    grads[t.id] = grads[t.id] + gi
                else:
                    grads[t.id] = gi

        leaf_grads = {}
        for leaf in self.leaves():
            g = grads.get(leaf.id)
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf_grads[leaf.id] = g
            if fill_leaves:
                leaf.grad = g
        return leaf_grads

    def replay(self) -> List[str]:
        """
        Re-run every recorded forward rule from the leaf values and compare
        with the stored outputs. Returns the ops that did not reproduce
        bit-exactly (empty list means the tape replays exactly).
        """
        values: Dict[int, np.ndarray] = {}
        mismatches = []
        for entry in self.entries:
            args = [values.get(t.id, t.data) for t in entry.inputs]
            out = entry.forward(*args)
            if not np.array_equal(out, entry.output.data):
                mismatches.append(entry.op)
            values[entry.output.id] = out
        return mismatches


def backward(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    return tape.backward(loss)


def _tape_stack() -> List[Tape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


# =============================================================================
# 2) FLOP accounting
# =============================================================================
class FlopCounter:
    """Accumulates per-op FLOP counts of every op executed inside the context."""

    def __init__(self):
        self.total = 0
        self.by_op: Dict[str, int] = defaultdict(int)

    def __enter__(self) -> "FlopCounter":
        _counter_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _counter_stack().pop()
        return False

    def add(self, op: str, flops: int):
        self.total += int(flops)
        self.by_op[op] += int(flops)


def _counter_stack() -> List[FlopCounter]:
    stack = getattr(_local, "counters", None)
    if stack is None:
        stack = _local.counters = []
    return stack


def count_flops(op: str, flops: int):
    for counter in _counter_stack():
        counter.add(op, flops)


# =============================================================================
# 3) Op plumbing
# =============================================================================
def emit(
    op: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_fn: Callable,
    forward_fn: Callable,
    flops: int = 0,
    recompute: bool = False,
    saved_bytes: Optional[Dict[str, int]] = None,
) -> Tensor:
    """Wrap an op result, count its FLOPs and record it on the active tape."""
    if checked_mode() and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    count_flops(op, flops)
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(
            TapeEntry(
                op=op,
                inputs=tuple(inputs),
                output=out,
                backward=backward_fn,
                forward=forward_fn,
                recompute=recompute,
                saved_bytes=saved_bytes or {},
            )
        )
    return out


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype or np.float64))


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _check_suffix(op: str, a_shape, b_shape):
    if a_shape == b_shape:
        return
    small, big = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if len(small) == 0 or tuple(big[len(big) - len(small):]) == tuple(small):
        return
    raise DimensionError(f"{op}: shapes {a_shape} and {b_shape} do not broadcast over leading axes")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return g.reshape((-1,) + tuple(shape)).sum(axis=0)


def checkpoint(
    op: str,
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    recompute_fn: Optional[Callable[..., Tensor]] = None,
) -> Tensor:
    """
    Record fn(*inputs) as a single tape entry that keeps only its output.

    The ops inside fn go to a throwaway tape; backward re-runs recompute_fn
    (default fn) on a fresh one and pulls the incoming gradient through it.
    `inputs` must list every tensor fn reads that needs a gradient, including
    parameters it reaches through closures. Without an active tape this is
    just fn(*inputs).
    """
    tape = current_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return fn(*inputs)
    recompute_fn = recompute_fn or fn

    with Tape():
        out_data = fn(*inputs).data

    def _forward(*arrays):
        with Tape():
            return recompute_fn(*(Tensor(a) for a in arrays)).data

    def _backward(g):
        with Tape() as inner:
            out = recompute_fn(*inputs)
        if not out.requires_grad:
            return [None] * len(inputs)
        grads = inner.backward(out, fill_leaves=False, seed=g)
        return [grads.get(t.id) for t in inputs]

    return emit(op, inputs, out_data, _backward, _forward, recompute=True,
                saved_bytes={"layer_outputs": out_data.nbytes})


# =============================================================================
# 4) Elementwise and structural ops
# =============================================================================
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_suffix("add", a.shape, b.shape)
    out = a.data + b.data

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return emit("add", (a, b), out, _backward, np.add, flops=out.size)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_suffix("sub", a.shape, b.shape)
    out = a.data - b.data

    def _backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return emit("sub", (a, b), out, _backward, np.subtract, flops=out.size)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_suffix("mul", a.shape, b.shape)
    out = a.data * b.data

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return emit("mul", (a, b), out, _backward, np.multiply, flops=out.size)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def _backward(g):
        return (g * out,)

    return emit("exp", (x,), out, _backward, np.exp, flops=out.size)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def _backward(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return emit("sum", (x,), out, _backward, lambda xd: np.asarray(xd.sum(), dtype=xd.dtype), flops=x.size)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        n = x.size
        out = np.asarray(x.data.mean(), dtype=x.dtype)

        def _backward(g):
            return (np.full(x.shape, g / n, dtype=x.dtype),)

        def _forward(xd):
            return np.asarray(xd.mean(), dtype=xd.dtype)

    else:
        axis = axis % x.ndim
        n = x.shape[axis]
        out = x.data.mean(axis=axis)

        def _backward(g):
            return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

        def _forward(xd):
            return xd.mean(axis=axis)

    return emit("mean", (x,), out, _backward, _forward, flops=x.size)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def _backward(g):
        return (g.reshape(x.shape),)

    return emit("reshape", (x,), out, _backward, lambda xd: xd.reshape(shape))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def _backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return emit("transpose", (x,), out, _backward, lambda xd: np.ascontiguousarray(xd.transpose(axes)))


def flip(x: Tensor, axis: int) -> Tensor:
    """Reverse one axis (time reversal of a (B, L, ...) sequence uses axis=1)."""
    out = np.ascontiguousarray(np.flip(x.data, axis=axis))

    def _backward(g):
        return (np.ascontiguousarray(np.flip(g, axis=axis)),)

    return emit("flip", (x,), out, _backward, lambda xd: np.ascontiguousarray(np.flip(xd, axis=axis)))


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    if p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout probability must lie in [0, 1), got {p}")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    out = x.data * mask

    def _backward(g):
        return (g * mask,)

    return emit("dropout", (x,), out, _backward, lambda xd: xd * mask, flops=x.size)


# =============================================================================
# 5) Matmul / conv1d
# =============================================================================
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    (.., M, K) @ (K, N) -> (.., M, N); leading axes of `a` are batch axes.
    """
    a, b = _pair(a, b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot contract {a.shape} with {b.shape}")
    out = a.data @ b.data
    k, n = b.shape
    rows = a.size // k

    def _backward(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return emit("matmul", (a, b), out, _backward, np.matmul, flops=2 * rows * k * n)


def _conv_pads(padding: str, k: int) -> Tuple[int, int]:
    if padding == "causal_left":
        return k - 1, 0
    if padding == "zero_symmetric":
        left = (k - 1) // 2
        return left, k - 1 - left
    if padding == "none":
        return 0, 0
    raise ContractError(f"unknown conv1d padding '{padding}', expected one of {CONV_PADDINGS}")


def conv1d(
    x: Tensor,
    w: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: str = "none",
    groups: int = 1,
) -> Tensor:
    """
    1-D cross-correlation of x (B, Cin, L) with w (Cout, Cin/groups, K).

    groups is 1 (dense) or Cin (depthwise, Cout == Cin).
    Lout = floor((L + pad_total - K) / stride) + 1.
    """
    if x.ndim != 3 or w.ndim != 3:
        raise DimensionError(f"conv1d: expected x (B,Cin,L) and w (Cout,Cin,K), got {x.shape} and {w.shape}")
    batch, c_in, length = x.shape
    c_out, c_per_group, k = w.shape
    depthwise = groups != 1
    if depthwise and not (groups == c_in == c_out and c_per_group == 1):
        raise DimensionError(f"conv1d: depthwise needs w of shape ({c_in},1,K), got {w.shape}")
    if not depthwise and c_per_group != c_in:
        raise DimensionError(f"conv1d: input channels {c_in} do not match weight {w.shape}")
    if stride < 1:
        raise DimensionError(f"conv1d: stride must be >= 1, got {stride}")
    left, right = _conv_pads(padding, k)
    padded = length + left + right
    if k > padded:
        raise DimensionError(f"conv1d: kernel {k} longer than padded input {padded} (x {x.shape})")
    l_out = (padded - k) // stride + 1
    inputs = (x, w) if bias is None else (x, w, bias)

    def _windows(xd):
        xp = np.pad(xd, ((0, 0), (0, 0), (left, right)))
        return sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]

    def _forward(xd, wd, bd=None):
        win = _windows(xd)
        if depthwise:
            out = np.einsum("bclk,ck->bcl", win, wd[:, 0, :])
        else:
            out = np.tensordot(win, wd, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
        out = np.ascontiguousarray(out)
        if bd is not None:
            out = out + bd[None, :, None]
        return out

    out = _forward(*(t.data for t in inputs))
    span = stride * (l_out - 1) + 1

    def _backward(g):
        # windows are rebuilt from x rather than kept alive
        win = _windows(x.data)
        gxp = np.zeros((batch, c_in, padded), dtype=x.dtype)
        if depthwise:
            gw = np.einsum("bcl,bclk->ck", g, win)[:, None, :]
            for j in range(k):
                gxp[:, :, j:j + span:stride] += g * w.data[:, 0, j][None, :, None]
        else:
            gw = np.tensordot(g, win, axes=([0, 2], [0, 2]))
            for j in range(k):
                gxp[:, :, j:j + span:stride] += np.tensordot(w.data[:, :, j], g, axes=([0], [1])).transpose(1, 0, 2)
        gx = gxp[:, :, left:left + length]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    flops = 2 * batch * c_out * l_out * c_per_group * k + (batch * c_out * l_out if bias is not None else 0)
    return emit(
        "conv1d", inputs, out, _backward, _forward, flops=flops,
        recompute=True, saved_bytes={"activations": x.nbytes},
    )


# =============================================================================
# 6) Activations
# =============================================================================
def _softplus(xd: np.ndarray) -> np.ndarray:
    return np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))


def _activation_forward(kind: str, xd: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(xd, 0)
    if kind == "sigmoid":
        return expit(xd)
    if kind == "softplus":
        return _softplus(xd)
    if kind == "swish":
        return xd * expit(xd)
    raise ContractError(f"unknown activation '{kind}', expected one of {ACTIVATIONS}")


def activation(kind: str, x: Tensor, recompute: bool = True) -> Tensor:
    """
    Elementwise relu / sigmoid / softplus / swish.

    With recompute, only the input is held for backward and the nonlinearity
    is evaluated again there; otherwise sigmoid(x) is cached as well.
    """
    out = _activation_forward(kind, x.data)
    cached = None if recompute or kind == "relu" else expit(x.data)

    def _sig():
        return cached if cached is not None else expit(x.data)

    def _backward(g):
        if kind == "relu":
            return (g * (x.data > 0),)
        s = _sig()
        if kind == "sigmoid":
            return (g * s * (1.0 - s),)
        if kind == "softplus":
            return (g * s,)
        return (g * (s + x.data * s * (1.0 - s)),)

    saved = x.nbytes + (cached.nbytes if cached is not None else 0)
    return emit(
        kind, (x,), out, _backward, lambda xd: _activation_forward(kind, xd),
        flops=4 * x.size, recompute=recompute, saved_bytes={"activations": saved},
    )


def relu(x: Tensor) -> Tensor:
    return activation("relu", x)


def sigmoid(x: Tensor) -> Tensor:
    return activation("sigmoid", x)


def softplus(x: Tensor) -> Tensor:
    return activation("softplus", x)


def swish(x: Tensor) -> Tensor:
    return activation("swish", x)


# =============================================================================
# 7) Normalization
# =============================================================================
def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (biased variance), then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} do not match last axis of {x.shape}")
    if eps < 0:
        raise DomainError(f"layer_norm: eps must be >= 0, got {eps}")

    def _normalize(xd):
        mu = xd.mean(axis=-1, keepdims=True)
        xc = xd - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        return xc * inv, inv

    def _forward(xd, gd, bd):
        xhat, _ = _normalize(xd)
        return xhat * gd + bd

    xhat, inv = _normalize(x.data)
    out = xhat * gamma.data + beta.data

    def _backward(g):
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return emit("layer_norm", (x, gamma, beta), out, _backward, _forward, flops=8 * x.size)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
) -> Tuple[Tensor, Optional[Tuple[np.ndarray, np.ndarray, int]]]:
    """
    Per-channel normalization of x (B, C, L) over the batch and length axes.

    Training mode normalizes with batch statistics and returns them
    (mean, biased var, count) so the caller can update running statistics;
    eval mode uses the frozen running statistics and returns None.
    """
    if x.ndim != 3 or gamma.shape != (x.shape[1],):
        raise DimensionError(f"batch_norm: x {x.shape} does not match gamma {gamma.shape}")
    axes = (0, 2)
    n = x.shape[0] * x.shape[2]
    shape = (1, -1, 1)

    if training:
        def _normalize(xd):
            mu = xd.mean(axis=axes, keepdims=True)
            xc = xd - mu
            var = (xc * xc).mean(axis=axes, keepdims=True)
            return xc / np.sqrt(var + eps), mu, var

        xhat, mu, var = _normalize(x.data)
        inv = 1.0 / np.sqrt(var + eps)
        stats = (mu.reshape(-1), var.reshape(-1), n)

        def _forward(xd, gd, bd):
            return _normalize(xd)[0] * gd.reshape(shape) + bd.reshape(shape)

        def _backward(g):
            gxhat = g * gamma.data.reshape(shape)
            gx = inv * (
                gxhat
                - gxhat.mean(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
            )
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        rm = running_mean.astype(x.dtype).reshape(shape)
        inv = (1.0 / np.sqrt(running_var.astype(x.dtype) + eps)).reshape(shape)
        xhat = (x.data - rm) * inv
        stats = None

        def _forward(xd, gd, bd):
            return (xd - rm) * inv * gd.reshape(shape) + bd.reshape(shape)

        def _backward(g):
            return g * gamma.data.reshape(shape) * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    return emit("batch_norm", (x, gamma, beta), out, _backward, _forward, flops=8 * x.size), stats


# =============================================================================
# 8) Losses
# =============================================================================
def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean sigmoid binary cross-entropy in the stable log-sum-exp form."""
    if logits.shape != targets.shape:
        raise DimensionError(f"bce_with_logits: logits {logits.shape} vs targets {targets.shape}")
    t = targets.astype(logits.dtype)
    n = logits.size

    def _forward(z):
        terms = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
        return np.asarray(terms.mean(), dtype=z.dtype)

    out = _forward(logits.data)

    def _backward(g):
        return (g * (expit(logits.data) - t) / n,)

    return emit("bce_with_logits", (logits,), out, _backward, _forward, flops=6 * n)


# =============================================================================
# 9) Gradient checking
# =============================================================================
def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Compare tape gradients with central finite differences.

    loss_fn rebuilds the scalar loss from `params` (perturbed in place).
    Returns the maximum of |a - n| / max(|a| + |n|, 1e-6) over the probed
    coordinates; max_coords samples a subset per parameter.
    """
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss, fill_leaves=False)
    rng = np.random.default_rng(seed)

    worst = 0.0
    for p in params:
        analytic = grads.get(p.id, np.zeros_like(p.data))
        coords = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            coords = rng.choice(p.size, size=max_coords, replace=False)
        for i in coords:
            orig = p.data.flat[i]
            p.data.flat[i] = orig + h
            f_plus = float(loss_fn().data)
            p.data.flat[i] = orig - h
            f_minus = float(loss_fn().data)
            p.data.flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic.flat[i])
            worst = max(worst, abs(a - numeric) / max(abs(a) + abs(numeric), 1e-6))
    return worst


# =============================================================================
# 10) Serialization (TSR1)
# =============================================================================
def tensor_to_bytes(t: Union[Tensor, np.ndarray]) -> bytes:
    """Little-endian: b'TSR1', u8 dtype code, u8 rank, rank x u32 extents, payload."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.dtype not in _DTYPE_CODES:
        raise FormatError(f"cannot serialize dtype {data.dtype}")
    code = _DTYPE_CODES[data.dtype]
    header = struct.pack(f"<4sBB{data.ndim}I", TENSOR_MAGIC, code, data.ndim, *data.shape)
    return header + np.ascontiguousarray(data, dtype=_CODE_DTYPES[code]).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> Tuple[Tensor, int]:
    """Decode one TSR1 record at `offset`; returns (tensor, offset past the record)."""
    if len(buf) - offset < 6:
        raise LengthError("truncated TSR1 header")
    magic, code, rank = struct.unpack_from("<4sBB", buf, offset)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown tensor dtype code {code}")
    offset += 6
    if len(buf) - offset < 4 * rank:
        raise LengthError("truncated TSR1 extents")
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    nbytes = count * dtype.itemsize
    if len(buf) - offset < nbytes:
        raise LengthError(f"TSR1 payload needs {nbytes} bytes, {len(buf) - offset} available")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape)
    return Tensor(data.astype(_CODE_NATIVE[code])), offset + nbytes
