"""
Property suite behind `verify`.

Each check is a small deterministic experiment returning (passed, detail).
Checks are grouped (tensor, scan, model, metrics) and selected with a filter
that matches either the group or a substring of the check name.
"""

import itertools
import logging
import math
import time
import traceback
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from src.config import ModelConfig
from src.metrics import accuracy, auc_macro, auc_per_class, f1_macro
from src.model import EcgMambaModel, MambaLayer, MambaBlockParams, mamba_block, positional_encoding
from src.ssm_kernel import (
    DiscretizedParams,
    SsmDirectionParams,
    _discretize_values,
    bidirectional_scan,
    causal_conv,
    dense_zoh,
    direction_scan,
    discretize,
    fused_selective_scan,
    geometric_bound,
    reverse_selective_scan,
    selective_scan,
    ssm_conv_kernel,
)
from src.tensor_core import (
    Tape,
    Tensor,
    activation,
    batch_norm,
    bce_with_logits,
    check_gradients,
    conv1d,
    flip,
    layer_norm,
    mul,
    sum_all,
    tensor_from_bytes,
    tensor_to_bytes,
)
from src.utils import write_canonical_json

logger = logging.getLogger(__name__)

GRAD_TOL = 1e-4
GROUPS = ("tensor", "scan", "model", "metrics")

CheckFn = Callable[[], Tuple[bool, dict]]
_REGISTRY: Dict[str, CheckFn] = {}


def check(name: str):
    def _register(fn: CheckFn) -> CheckFn:
        _REGISTRY[name] = fn
        return fn
    return _register


@dataclass
class CheckResult:
    name: str
    group: str
    passed: bool
    seconds: float
    detail: dict = field(default_factory=dict)


def _param(rng, shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return sum_all(mul(out, Tensor(weights)))


def _grad_result(err: float) -> Tuple[bool, dict]:
    return err < GRAD_TOL, {"max_rel_err": err, "tol": GRAD_TOL}


def random_direction_params(rng: np.random.Generator, d_inner: int, d_state: int, kernel: int) -> SsmDirectionParams:
    return SsmDirectionParams.initialize(d_inner, d_state, kernel, rng)


# =============================================================================
# Brute-force metric oracles
# =============================================================================
def brute_force_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Macro mean over valid classes of pairwise win rate (ties count ½)."""
    per_class = []
    for k in range(scores.shape[1]):
        pos = scores[labels[:, k] == 1, k]
        neg = scores[labels[:, k] == 0, k]
        if len(pos) == 0 or len(neg) == 0:
            continue
        wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
        per_class.append(wins / (len(pos) * len(neg)))
    return float(np.mean(per_class)) if per_class else float("nan")


def brute_force_f1(pred: np.ndarray, labels: np.ndarray) -> float:
    scores = []
    for k in range(pred.shape[1]):
        tp = fp = fn = 0
        for p, t in zip(pred[:, k], labels[:, k]):
            tp += int(p == 1 and t == 1)
            fp += int(p == 1 and t == 0)
            fn += int(p == 0 and t == 1)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return float(np.mean(scores))


def brute_force_accuracy(pred: np.ndarray, labels: np.ndarray) -> Tuple[float, float]:
    rows = [all(p == t for p, t in zip(pr, lr)) for pr, lr in zip(pred, labels)]
    cells = [p == t for pr, lr in zip(pred, labels) for p, t in zip(pr, lr)]
    return sum(rows) / len(rows), sum(cells) / len(cells)


# =============================================================================
# tensor
# =============================================================================
@check("tensor.grad_conv1d")
def _grad_conv1d():
    rng = np.random.default_rng(1)
    worst = 0.0
    x = _param(rng, (2, 3, 9))
    cases = [
        (_param(rng, (4, 3, 3)), _param(rng, (4,)), 2, "zero_symmetric", 1),
        (_param(rng, (3, 1, 2)), _param(rng, (3,)), 1, "causal_left", 3),
        (_param(rng, (2, 3, 4)), None, 3, "none", 1),
    ]
    for w, b, stride, padding, groups in cases:
        probe = conv1d(x, w, b, stride, padding, groups)
        weights = rng.standard_normal(probe.shape)
        params = [x, w] + ([b] if b is not None else [])
        worst = max(worst, check_gradients(
            lambda: _weighted_sum(conv1d(x, w, b, stride, padding, groups), weights), params))
    return _grad_result(worst)


@check("tensor.grad_layer_norm")
def _grad_layer_norm():
    rng = np.random.default_rng(2)
    x, g, b = _param(rng, (2, 3, 5)), _param(rng, (5,)), _param(rng, (5,))
    weights = rng.standard_normal((2, 3, 5))
    return _grad_result(check_gradients(lambda: _weighted_sum(layer_norm(x, g, b), weights), [x, g, b]))


@check("tensor.grad_batch_norm")
def _grad_batch_norm():
    rng = np.random.default_rng(3)
    x, g, b = _param(rng, (3, 2, 4)), _param(rng, (2,)), _param(rng, (2,))
    weights = rng.standard_normal((3, 2, 4))
    rm, rv = np.zeros(2), np.ones(2)

    def _loss():
        return _weighted_sum(batch_norm(x, g, b, rm, rv, training=True)[0], weights)

    return _grad_result(check_gradients(_loss, [x, g, b]))


@check("tensor.grad_activations_and_loss")
def _grad_activations():
    rng = np.random.default_rng(4)
    x = _param(rng, (3, 4), -3.0, 3.0)
    weights = rng.standard_normal((3, 4))
    worst = 0.0
    for kind in ("sigmoid", "softplus", "swish"):
        for recompute in (True, False):
            worst = max(worst, check_gradients(
                lambda: _weighted_sum(activation(kind, x, recompute), weights), [x]))
    targets = (rng.random((3, 4)) > 0.5).astype(np.float64)
    worst = max(worst, check_gradients(lambda: bce_with_logits(x, targets), [x]))
    return _grad_result(worst)


@check("tensor.tape_replay")
def _tape_replay():
    cfg = ModelConfig(n_classes=2, n_leads=2, signal_length=16, n_layers=1, d_model=4, ssm_state=2,
                      conv_kernel=2, encoder=[(4, 4, 4)])
    model = EcgMambaModel(cfg, seed=0, dtype="f64").train()
    x = np.random.default_rng(5).standard_normal((2, 2, 16))
    with Tape() as tape:
        model.forward(x)
    mismatches = tape.replay()
    return not mismatches, {"ops": len(tape.entries), "mismatches": mismatches}


@check("tensor.serialization")
def _serialization():
    rng = np.random.default_rng(6)
    ok = True
    for dtype in (np.float64, np.float32):
        for shape in ((), (3,), (2, 3, 4)):
            data = rng.standard_normal(shape).astype(dtype)
            decoded, offset = tensor_from_bytes(tensor_to_bytes(Tensor(data)))
            ok &= decoded.dtype == data.dtype and np.array_equal(decoded.data, data)
            ok &= offset == len(tensor_to_bytes(Tensor(data)))
    return bool(ok), {}


# =============================================================================
# scan
# =============================================================================
@check("scan.kernel_equivalence")
def _kernel_equivalence():
    rng = np.random.default_rng(10)
    worst = 0.0
    ok = True
    for i in range(100):
        d, n, length, batch = rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 65), 2
        a = -rng.uniform(0.1, 2.0, size=(d, n))
        delta = rng.uniform(1e-3, 0.5, size=d)
        b_in, c = rng.standard_normal(n), rng.standard_normal(n)
        rule = ("euler_b", "zoh_b")[i % 2]
        a_bar, b_bar = _discretize_values(delta, a, b_in, rule)
        x = rng.standard_normal((batch, length, d))
        p = DiscretizedParams(
            a_bar=Tensor(np.broadcast_to(a_bar, (batch, length, d, n)).copy()),
            b_bar=Tensor(np.broadcast_to(b_bar, (batch, length, d, n)).copy()),
            c=Tensor(np.broadcast_to(c, (batch, length, n)).copy()),
        )
        y_scan = selective_scan(p, Tensor(x)).data
        y_conv = causal_conv(x, ssm_conv_kernel(a_bar, b_bar, c, length)).data
        ok &= np.allclose(y_scan, y_conv, rtol=1e-10, atol=1e-12)
        worst = max(worst, float(np.max(np.abs(y_scan - y_conv))))
    return bool(ok), {"instances": 100, "max_abs_diff": worst}


@check("scan.grad_discretize")
def _grad_discretize():
    rng = np.random.default_rng(11)
    worst = 0.0
    for rule in ("euler_b", "zoh_b"):
        delta = _param(rng, (1, 3, 2), 0.05, 0.8)
        a = _param(rng, (2, 3), -2.0, -0.2)
        b_in = _param(rng, (1, 3, 3))
        w1, w2 = rng.standard_normal((1, 3, 2, 3)), rng.standard_normal((1, 3, 2, 3))

        def _loss():
            p = discretize(delta, a, b_in, rule)
            return _weighted_sum(p.a_bar, w1) + _weighted_sum(p.b_bar, w2)

        worst = max(worst, check_gradients(_loss, [delta, a, b_in]))
    return _grad_result(worst)


@check("scan.grad_selective_scan")
def _grad_selective_scan():
    rng = np.random.default_rng(12)
    worst = 0.0
    for strategy in ("cache_all", "recompute"):
        a_bar = _param(rng, (2, 5, 3, 2), 0.3, 0.95)
        b_bar, c, x = _param(rng, (2, 5, 3, 2)), _param(rng, (2, 5, 2)), _param(rng, (2, 5, 3))
        weights = rng.standard_normal((2, 5, 3))

        def _loss():
            return _weighted_sum(selective_scan(DiscretizedParams(a_bar, b_bar, c), x, strategy), weights)

        worst = max(worst, check_gradients(_loss, [a_bar, b_bar, c, x]))
    return _grad_result(worst)


@check("scan.grad_fused_scan")
def _grad_fused_scan():
    rng = np.random.default_rng(13)
    worst = 0.0
    for rule, strategy in itertools.product(("euler_b", "zoh_b"), ("cache_all", "recompute")):
        delta = _param(rng, (1, 6, 3), 0.05, 0.8)
        a = _param(rng, (3, 2), -2.0, -0.2)
        b_in, c, x = _param(rng, (1, 6, 2)), _param(rng, (1, 6, 2)), _param(rng, (1, 6, 3))
        weights = rng.standard_normal((1, 6, 3))

        def _loss():
            return _weighted_sum(fused_selective_scan(delta, a, b_in, c, x, rule, strategy), weights)

        worst = max(worst, check_gradients(_loss, [delta, a, b_in, c, x]))
    return _grad_result(worst)


def _scan_grads(strategy: str, seed: int) -> List[np.ndarray]:
    rng = np.random.default_rng(seed)
    batch, length, d, n = 2, 32, 4, 8
    delta = _param(rng, (batch, length, d), 0.01, 0.5)
    a = _param(rng, (d, n), -2.0, -0.1)
    b_in, c, x = _param(rng, (batch, length, n)), _param(rng, (batch, length, n)), _param(rng, (batch, length, d))
    weights = rng.standard_normal((batch, length, d))
    with Tape() as tape:
        loss = _weighted_sum(fused_selective_scan(delta, a, b_in, c, x, "zoh_b", strategy), weights)
    grads = tape.backward(loss)
    return [grads[t.id] for t in (delta, a, b_in, c, x)]


def scan_state_bytes(strategy: str, length: int, batch: int = 1, d: int = 4, n: int = 8) -> int:
    """Recorded scan-state bytes on the tape for one fused scan."""
    rng = np.random.default_rng(0)
    delta = _param(rng, (batch, length, d), 0.01, 0.5)
    a = _param(rng, (d, n), -2.0, -0.1)
    b_in, c, x = _param(rng, (batch, length, n)), _param(rng, (batch, length, n)), _param(rng, (batch, length, d))
    with Tape() as tape:
        fused_selective_scan(delta, a, b_in, c, x, "euler_b", strategy)
    return tape.saved_bytes("scan_states")


@check("scan.recompute_equivalence")
def _recompute_equivalence():
    cached = _scan_grads("cache_all", 14)
    recomputed = _scan_grads("recompute", 14)
    diff = max(float(np.max(np.abs(g1 - g2))) for g1, g2 in zip(cached, recomputed))
    bytes_cached = scan_state_bytes("cache_all", 1024)
    bytes_recompute = scan_state_bytes("recompute", 1024)
    ratio = bytes_recompute / bytes_cached
    return diff < 1e-12 and ratio <= 0.6, {
        "max_grad_diff": diff,
        "bytes_cached_L1024": bytes_cached,
        "bytes_recompute_L1024": bytes_recompute,
        "ratio": ratio,
    }


@check("scan.fused_matches_materialized")
def _fused_matches_materialized():
    rng = np.random.default_rng(15)
    worst = 0.0
    for rule in ("euler_b", "zoh_b"):
        delta = Tensor(rng.uniform(0.01, 0.5, (2, 12, 3)))
        a = Tensor(-rng.uniform(0.1, 2.0, (3, 4)))
        b_in, c, x = (Tensor(rng.standard_normal(s)) for s in ((2, 12, 4), (2, 12, 4), (2, 12, 3)))
        fused = fused_selective_scan(delta, a, b_in, c, x, rule).data
        materialized = selective_scan(discretize(delta, a, b_in, rule, c), x).data
        worst = max(worst, float(np.max(np.abs(fused - materialized))))
    return worst < 1e-12, {"max_abs_diff": worst}


@check("scan.reversal")
def _reversal():
    rng = np.random.default_rng(16)
    ok = True
    for _ in range(100):
        batch, length, d, n = 1 + rng.integers(2), 1 + rng.integers(16), 1 + rng.integers(4), 1 + rng.integers(4)
        p_fwd = random_direction_params(rng, d, n, 2)
        p_bwd = random_direction_params(rng, d, n, 2)
        x = Tensor(rng.standard_normal((batch, length, d)))
        _, y_bwd = bidirectional_scan(p_fwd, p_bwd, x)
        expected = np.flip(direction_scan(p_bwd, Tensor(np.ascontiguousarray(np.flip(x.data, 1)))).data, 1)
        ok &= np.array_equal(y_bwd.data, expected)

        a_bar = Tensor(rng.uniform(0.2, 0.99, (batch, length, d, n)))
        b_bar, c = Tensor(rng.standard_normal((batch, length, d, n))), Tensor(rng.standard_normal((batch, length, n)))
        reversed_scan = reverse_selective_scan(DiscretizedParams(a_bar, b_bar, c), x).data
        flipped = DiscretizedParams(flip(a_bar, 1), flip(b_bar, 1), flip(c, 1))
        ok &= np.array_equal(reversed_scan, np.flip(selective_scan(flipped, flip(x, 1)).data, 1))
    return bool(ok), {"instances": 100}


@check("scan.zoh_matches_dense")
def _zoh_matches_dense():
    rng = np.random.default_rng(17)
    worst = 0.0
    for _ in range(20):
        n = 1 + rng.integers(6)
        a = -rng.uniform(0.1, 3.0, n)
        b = rng.standard_normal(n)
        delta = float(rng.uniform(0.01, 0.5))
        a_dense, b_dense = dense_zoh(np.diag(a), b[:, None], delta)
        a_bar, b_bar = _discretize_values(np.array([delta]), a[None, :], b, "zoh_b")
        worst = max(worst,
                    float(np.max(np.abs(np.diag(a_dense) - a_bar[0]))),
                    float(np.max(np.abs(b_dense[:, 0] - b_bar[0]))))
    return worst < 1e-10, {"max_abs_diff": worst}


@check("scan.geometric_bound")
def _geometric_bound():
    rng = np.random.default_rng(18)
    ok = True
    for _ in range(20):
        d, n, length = 3, 4, 64
        a = -rng.uniform(0.1, 2.0, (d, n))
        delta = rng.uniform(0.01, 0.5, (1, length, d))
        b_in = rng.standard_normal((1, length, n))
        c = rng.standard_normal((1, length, n))
        x = rng.uniform(-1.0, 1.0, (1, length, d))
        a_bar, b_bar = _discretize_values(delta, a, b_in, "zoh_b")
        y = fused_selective_scan(Tensor(delta), Tensor(a), Tensor(b_in), Tensor(c), Tensor(x), "zoh_b").data
        ok &= bool(np.all(np.isfinite(y))) and float(np.abs(y).max()) <= geometric_bound(a_bar, b_bar, c, 1.0)
    return bool(ok), {}


# =============================================================================
# model
# =============================================================================
def _tiny_config(**overrides) -> ModelConfig:
    base = dict(n_classes=3, n_leads=2, signal_length=64, n_layers=1, d_model=4, ssm_state=4, conv_kernel=2,
                expand=2, encoder=[(4, 8, 8)], ffn_hidden=8)
    base.update(overrides)
    return ModelConfig(**base)


@check("model.positional_encoding")
def _positional_encoding():
    length, d = 1000, 128
    pe = positional_encoding(length, d).data
    ref = np.empty((length, d))
    for pos in range(length):
        for i in range(d // 2):
            angle = pos / math.pow(10000.0, 2 * i / d)
            ref[pos, 2 * i] = math.sin(angle)
            ref[pos, 2 * i + 1] = math.cos(angle)
    diff = float(np.max(np.abs(pe - ref)))
    anchors = bool(np.all(pe[0, 0::2] == 0.0) and np.all(pe[0, 1::2] == 1.0))
    return diff < 1e-12 and anchors, {"max_abs_diff": diff}


@check("model.grad_mamba_block")
def _grad_mamba_block():
    rng = np.random.default_rng(20)
    cfg = _tiny_config(d_model=4, ssm_state=4, expand=2, conv_kernel=2)
    block = MambaBlockParams.initialize(cfg, rng)
    x = _param(rng, (1, 8, 4))
    weights = rng.standard_normal((1, 8, 4))
    params = [x] + [t for _, t in block.named_parameters("block")]
    err = check_gradients(lambda: _weighted_sum(mamba_block(x, block), weights), params, max_coords=6)
    return _grad_result(err)


@check("model.grad_mamba_layer")
def _grad_mamba_layer():
    rng = np.random.default_rng(21)
    layer = MambaLayer(_tiny_config(), rng)
    x = _param(rng, (1, 8, 4))
    weights = rng.standard_normal((1, 8, 4))
    params = [x] + [t for _, t in layer.named_parameters("layer")]
    return _grad_result(check_gradients(lambda: _weighted_sum(layer(x), weights), params, max_coords=6))


@check("model.grad_full_model")
def _grad_full_model():
    cfg = _tiny_config(d_model=8, ssm_state=4, conv_kernel=4, encoder=[(8, 8, 8)], ffn_hidden=16)
    model = EcgMambaModel(cfg, seed=22, dtype="f64").train()
    rng = np.random.default_rng(22)
    x = rng.standard_normal((2, 2, 64))
    targets = (rng.random((2, 3)) > 0.5).astype(np.float64)
    buffers = [(bn.running_mean.copy(), bn.running_var.copy()) for _, bn in model.encoder.blocks]

    def _loss():
        return bce_with_logits(model.forward(x, stats_sink=[]), targets)

    err = check_gradients(_loss, model.parameters(), max_coords=3)
    unchanged = all(np.array_equal(bn.running_mean, rm) and np.array_equal(bn.running_var, rv)
                    for (_, bn), (rm, rv) in zip(model.encoder.blocks, buffers))
    passed, detail = _grad_result(err)
    return passed and unchanged, detail


def _zero_block(layer: MambaLayer):
    for _, t in layer.block.named_parameters("block"):
        t.data[...] = 0.0


@check("model.zero_stack_identity")
def _zero_stack_identity():
    rng = np.random.default_rng(23)
    cfg = _tiny_config(use_ln=False, use_ffn=False, n_layers=3)
    model = EcgMambaModel(cfg, seed=23, dtype="f64")
    x = Tensor(rng.standard_normal((2, 8, 4)))
    h = x
    for layer in model.layers:
        _zero_block(layer)
        h = layer(h)
    return bool(np.array_equal(h.data, x.data)), {}


@check("model.batch_permutation")
def _batch_permutation():
    rng = np.random.default_rng(24)
    model = EcgMambaModel(_tiny_config(), seed=24, dtype="f64").eval()
    x = rng.standard_normal((5, 2, 64))
    perm = rng.permutation(5)
    logits = model.forward(x).data
    permuted = model.forward(x[perm]).data
    again = model.forward(x).data
    return bool(np.allclose(permuted, logits[perm], rtol=0, atol=1e-12) and np.array_equal(logits, again)), {}


# =============================================================================
# metrics
# =============================================================================
@check("metrics.oracle")
def _metrics_oracle():
    rng = np.random.default_rng(30)
    worst = 0.0
    for _ in range(200):
        batch, classes = 2 + rng.integers(31), 1 + rng.integers(9)
        labels = (rng.random((batch, classes)) < rng.uniform(0.2, 0.8)).astype(np.int8)
        scores = np.round(rng.random((batch, classes)), 2)
        pred = (rng.random((batch, classes)) > 0.5).astype(np.int8)
        oracle_auc = brute_force_auc(scores, labels)
        if not math.isnan(oracle_auc):
            worst = max(worst, abs(auc_macro(scores, labels) - oracle_auc))
        worst = max(worst, abs(f1_macro(pred, labels) - brute_force_f1(pred, labels)))
        subset, per_label = brute_force_accuracy(pred, labels)
        worst = max(worst, abs(accuracy(pred, labels, "subset") - subset),
                    abs(accuracy(pred, labels, "per_label") - per_label))
    return worst < 1e-12, {"instances": 200, "max_abs_diff": worst}


@check("metrics.monotone_invariance")
def _monotone_invariance():
    rng = np.random.default_rng(31)
    worst = 0.0
    for _ in range(50):
        labels = (rng.random((20, 4)) < 0.5).astype(np.int8)
        labels[0], labels[1] = 1, 0
        scores = rng.standard_normal((20, 4))
        a1 = auc_per_class(scores, labels)
        a2 = auc_per_class(scores ** 3 + scores, labels)
        worst = max(worst, float(np.nanmax(np.abs(a1 - a2))))
    return worst == 0.0, {"max_abs_diff": worst}


# =============================================================================
# Runner
# =============================================================================
def check_names(filter: Optional[str] = None) -> List[str]:
    names = sorted(_REGISTRY)
    if not filter:
        return names
    return [n for n in names if n.split(".")[0] == filter or filter in n]


def run_checks(filter: Optional[str] = None) -> List[CheckResult]:
    results = []
    for name in check_names(filter):
        group = name.split(".")[0]
        start = time.perf_counter()
        try:
            passed, detail = _REGISTRY[name]()
        except Exception as e:
            passed, detail = False, {"error": f"{type(e).__name__}: {e}", "traceback": traceback.format_exc()}
        elapsed = time.perf_counter() - start
        results.append(CheckResult(name, group, bool(passed), round(elapsed, 4), detail))
        status = "PASS" if passed else "FAIL"
        log = logger.info if passed else logger.error
        log(f"[VERIFY] {status} {name} ({elapsed:.2f}s) {detail if not passed else ''}".rstrip())
    return results


def write_report(results: List[CheckResult], path: str):
    write_canonical_json(path, {
        "passed": all(r.passed for r in results),
        "n_checks": len(results),
        "failed": [r.name for r in results if not r.passed],
        "checks": [asdict(r) for r in results],
    })
