"""
ECGMamba network.

    signal (B, C_lead, T)
      -> ECG encoder (Conv1d -> BatchNorm -> ReLU, non-overlapping strides)
      -> + sinusoidal positional encoding              (B, L, D)
      -> n_layers x [LN(x + MambaBlock(x)); LN(u + FFN(u))]
      -> mean over L -> linear head                    (B, n_classes)

Parameters are plain Tensors held by small layer objects; every layer exposes
named_parameters() in a fixed order so checkpoints and optimizer state line up.
"""

import copy
import json
import logging
import math
import struct
from dataclasses import dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.config import ModelConfig
from src.errors import ConfigError, DimensionError, FormatError, LengthError
from src.ssm_kernel import SsmDirectionParams, bidirectional_scan
from src.tensor_core import (
    DTYPES,
    FlopCounter,
    Tensor,
    add,
    batch_norm,
    checkpoint,
    conv1d,
    dropout,
    layer_norm,
    matmul,
    mean,
    mul,
    relu,
    swish,
    tensor_from_bytes,
    tensor_to_bytes,
    transpose,
)
from src.utils import canonical_json, checked_mode, ensure_parent

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ECGM0001"

NamedParams = List[Tuple[str, Tensor]]


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


# =============================================================================
# Layers
# =============================================================================
class Linear:
    """x (.., d_in) @ weight (d_in, d_out) + bias."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, dtype=np.float64):
        self.weight = _uniform(rng, (d_in, d_out), d_in, dtype)
        self.bias = _uniform(rng, (d_out,), d_in, dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return add(y, self.bias) if self.bias is not None else y

    def named_parameters(self, prefix: str) -> NamedParams:
        out = [(f"{prefix}.weight", self.weight)]
        if self.bias is not None:
            out.append((f"{prefix}.bias", self.bias))
        return out


class Conv1d:
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: str = "none",
        groups: int = 1,
        bias: bool = True,
        dtype=np.float64,
    ):
        fan_in = (c_in // groups) * kernel
        self.weight = _uniform(rng, (c_out, c_in // groups, kernel), fan_in, dtype)
        self.bias = _uniform(rng, (c_out,), fan_in, dtype) if bias else None
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding, groups=self.groups)

    def named_parameters(self, prefix: str) -> NamedParams:
        out = [(f"{prefix}.weight", self.weight)]
        if self.bias is not None:
            out.append((f"{prefix}.bias", self.bias))
        return out


class BatchNorm1d:
    """
    Per-channel normalization with running statistics (momentum update,
    unbiased running variance). Statistics are only committed through
    commit(), so a coordinator can apply micro-batch updates in order.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool, stats_sink: Optional[list] = None) -> Tensor:
        out, stats = batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, training, self.eps)
        if stats is not None:
            if stats_sink is None:
                self.commit(stats)
            else:
                stats_sink.append((self, stats))
        return out

    def commit(self, stats):
        mu, var, n = stats
        unbiased = var.astype(np.float64) * (n / max(n - 1, 1))
        self.running_mean = (1.0 - self.momentum) * self.running_mean + self.momentum * mu.astype(np.float64)
        self.running_var = (1.0 - self.momentum) * self.running_var + self.momentum * unbiased

    def named_parameters(self, prefix: str) -> NamedParams:
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]

    def named_buffers(self, prefix: str) -> Dict[str, np.ndarray]:
        return {f"{prefix}.running_mean": self.running_mean, f"{prefix}.running_var": self.running_var}


class LayerNorm:
    def __init__(self, d: int, eps: float = 1e-5, dtype=np.float64):
        self.gamma = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)

    def named_parameters(self, prefix: str) -> NamedParams:
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]


# =============================================================================
# ECG encoder
# =============================================================================
class EcgEncoder:
    """
    Conv1d(stride = kernel) -> BatchNorm -> ReLU blocks; with use_encoder off,
    a per-timestep linear lead-mixing projection C_lead -> D instead.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float64):
        self.use_encoder = cfg.use_encoder
        self.blocks: List[Tuple[Conv1d, BatchNorm1d]] = []
        self.lead_projection: Optional[Linear] = None
        if cfg.use_encoder:
            c_in = cfg.n_leads
            for c_out, kernel, stride in cfg.encoder:
                conv = Conv1d(c_in, c_out, kernel, rng, stride=stride, dtype=dtype)
                self.blocks.append((conv, BatchNorm1d(c_out, cfg.bn_momentum, dtype=dtype)))
                c_in = c_out
        else:
            self.lead_projection = Linear(cfg.n_leads, cfg.d_model, rng, dtype=dtype)

    def __call__(self, signal: Tensor, training: bool = False, stats_sink: Optional[list] = None) -> Tensor:
        return ecg_encode(signal, self, training, stats_sink)

    def named_parameters(self, prefix: str) -> NamedParams:
        if self.lead_projection is not None:
            return self.lead_projection.named_parameters(f"{prefix}.lead_projection")
        out = []
        for i, (conv, bn) in enumerate(self.blocks):
            out += conv.named_parameters(f"{prefix}.{i}.conv")
            out += bn.named_parameters(f"{prefix}.{i}.bn")
        return out

    def named_buffers(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {}
        for i, (_, bn) in enumerate(self.blocks):
            out.update(bn.named_buffers(f"{prefix}.{i}.bn"))
        return out


def ecg_encode(
    signal: Tensor,
    encoder: EcgEncoder,
    training: bool = False,
    stats_sink: Optional[list] = None,
) -> Tensor:
    """(B, C_lead, T) -> (B, L, D)"""
    if encoder.lead_projection is not None:
        return encoder.lead_projection(transpose(signal, (0, 2, 1)))
    x = signal
    for conv, bn in encoder.blocks:
        x = relu(bn(conv(x), training, stats_sink))
    return transpose(x, (0, 2, 1))


def positional_encoding(length: int, d: int, dtype=np.float64) -> Tensor:
    """PE[pos, 2i] = sin(pos / 10000^(2i/D)), PE[pos, 2i+1] = cos(same)."""
    if d % 2:
        raise ConfigError(f"positional encoding needs an even model width, got {d}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = np.power(10000.0, np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((length, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return Tensor(pe.astype(dtype))


# =============================================================================
# Mamba block, FFN, layer
# =============================================================================
@dataclass
class MambaBlockParams:
    in_proj_x: Linear
    in_proj_z: Linear
    forward_dir: SsmDirectionParams
    backward_dir: SsmDirectionParams
    out_proj: Linear

    @staticmethod
    def initialize(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float64) -> "MambaBlockParams":
        d, ed = cfg.d_model, cfg.d_inner

        def _direction():
            return SsmDirectionParams.initialize(
                ed, cfg.ssm_state, cfg.conv_kernel, rng, dtype, cfg.dt_min, cfg.dt_max
            )

        return MambaBlockParams(
            in_proj_x=Linear(d, ed, rng, bias=False, dtype=dtype),
            in_proj_z=Linear(d, ed, rng, bias=False, dtype=dtype),
            forward_dir=_direction(),
            backward_dir=_direction(),
            out_proj=Linear(ed, d, rng, bias=False, dtype=dtype),
        )

    def named_parameters(self, prefix: str) -> NamedParams:
        out = self.in_proj_x.named_parameters(f"{prefix}.in_proj_x")
        out += self.in_proj_z.named_parameters(f"{prefix}.in_proj_z")
        for label, direction in (("forward", self.forward_dir), ("backward", self.backward_dir)):
            out += [(f"{prefix}.{label}.{f.name}", getattr(direction, f.name)) for f in fields(direction)]
        out += self.out_proj.named_parameters(f"{prefix}.out_proj")
        return out


def mamba_block(
    x: Tensor,
    p: MambaBlockParams,
    rule: str = "euler_b",
    strategy: str = "recompute",
) -> Tensor:
    """
    x, z = Linear(x), Linear(x); y_f, y_b = bidirectional scan of x;
    y′ = (y_f + y_b) ⊙ swish(z); out = Linear(y′). Shape (B, L, D) in and out.
    """
    xs = p.in_proj_x(x)
    z = p.in_proj_z(x)
    y_fwd, y_bwd = bidirectional_scan(p.forward_dir, p.backward_dir, xs, rule=rule, strategy=strategy)
    return p.out_proj(mul(add(y_fwd, y_bwd), swish(z)))


class FeedForward:
    """Conv1d(D -> hidden) -> ReLU -> Conv1d(hidden -> D), length-preserving."""

    def __init__(self, d: int, hidden: int, kernel: int, rng: np.random.Generator, dtype=np.float64):
        self.conv1 = Conv1d(d, hidden, kernel, rng, padding="zero_symmetric", dtype=dtype)
        self.conv2 = Conv1d(hidden, d, kernel, rng, padding="zero_symmetric", dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ffn(x, self)

    def named_parameters(self, prefix: str) -> NamedParams:
        return self.conv1.named_parameters(f"{prefix}.conv1") + self.conv2.named_parameters(f"{prefix}.conv2")


def ffn(x: Tensor, p: FeedForward) -> Tensor:
    """(B, L, D) -> (B, L, D)"""
    h = relu(p.conv1(transpose(x, (0, 2, 1))))
    return transpose(p.conv2(h), (0, 2, 1))


class MambaLayer:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float64):
        self.block = MambaBlockParams.initialize(cfg, rng, dtype)
        self.use_ln = cfg.use_ln
        self.ln1 = LayerNorm(cfg.d_model, cfg.ln_eps, dtype) if cfg.use_ln else None
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_hidden, cfg.ffn_kernel, rng, dtype) if cfg.use_ffn else None
        self.ln2 = LayerNorm(cfg.d_model, cfg.ln_eps, dtype) if cfg.use_ln and cfg.use_ffn else None
        self.rule = cfg.discretization
        self.strategy = cfg.scan_strategy
        self.dropout = cfg.dropout
        self.checkpoint = cfg.checkpoint_layers

    def __call__(self, x: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        if not self.checkpoint:
            return mamba_layer(x, self, training, rng)
        # backward re-runs the layer, so it must see the same dropout masks
        replay = copy.deepcopy(rng) if rng is not None else None

        def _recompute(x_in, *_params):
            return mamba_layer(x_in, self, training, copy.deepcopy(replay) if replay is not None else None)

        params = [t for _, t in self.named_parameters("")]
        return checkpoint("mamba_layer", lambda x_in, *_: mamba_layer(x_in, self, training, rng), [x] + params,
                          _recompute)

    def named_parameters(self, prefix: str) -> NamedParams:
        out = self.block.named_parameters(f"{prefix}.block")
        if self.ln1 is not None:
            out += self.ln1.named_parameters(f"{prefix}.ln1")
        if self.ffn is not None:
            out += self.ffn.named_parameters(f"{prefix}.ffn")
        if self.ln2 is not None:
            out += self.ln2.named_parameters(f"{prefix}.ln2")
        return out


def mamba_layer(
    x: Tensor,
    layer: MambaLayer,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """u = LN(x + block(x)); out = LN(u + ffn(u)). LN is identity with use_ln off."""

    def _sublayer(h):
        if training and layer.dropout > 0 and rng is not None:
            return dropout(h, layer.dropout, rng)
        return h

    u = add(x, _sublayer(mamba_block(x, layer.block, layer.rule, layer.strategy)))
    if layer.use_ln:
        u = layer.ln1(u)
    if layer.ffn is None:
        return u
    out = add(u, _sublayer(ffn(u, layer.ffn)))
    if layer.use_ln:
        out = layer.ln2(out)
    return out


# =============================================================================
# Full model
# =============================================================================
class EcgMambaModel:
    """
    Encoder + positional encoding + Mamba layers + mean-pooled linear head.

    Usage:
        model = EcgMambaModel(ModelConfig(n_classes=5), seed=0)
        logits = model.forward(batch)          # (B, n_classes)
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype: str = "f64"):
        self.config = cfg
        self.dtype_name = dtype
        self.dtype = DTYPES[dtype]
        rng = np.random.default_rng(seed)
        self.dropout_rng = np.random.default_rng(seed + 1)
        self.encoder = EcgEncoder(cfg, rng, self.dtype)
        self.layers = [MambaLayer(cfg, rng, self.dtype) for _ in range(cfg.n_layers)]
        self.head = Linear(cfg.d_model, cfg.n_classes, rng, dtype=self.dtype)
        self.seq_len = cfg.sequence_length()
        self.pe = positional_encoding(self.seq_len, cfg.d_model, self.dtype)
        self.training = False

        names = [name for name, _ in self.named_parameters()]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names in model")

    # -------------------------------------------------------------------------
    # Modes and parameters
    # -------------------------------------------------------------------------
    def train(self) -> "EcgMambaModel":
        self.training = True
        return self

    def eval(self) -> "EcgMambaModel":
        self.training = False
        return self

    def named_parameters(self) -> NamedParams:
        out = self.encoder.named_parameters("encoder")
        for i, layer in enumerate(self.layers):
            out += layer.named_parameters(f"layers.{i}")
        out += self.head.named_parameters("head")
        for name, t in out:
            t.name = name
        return out

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self) -> Dict[str, np.ndarray]:
        return self.encoder.named_buffers("encoder")

    def num_params(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    # -------------------------------------------------------------------------
    # Forward
    # -------------------------------------------------------------------------
    def _as_input(self, signal) -> Tensor:
        data = signal.data if isinstance(signal, Tensor) else np.asarray(signal)
        expected = (self.config.n_leads, self.config.signal_length)
        if data.ndim != 3 or tuple(data.shape[1:]) != expected:
            raise DimensionError(f"model expects input (B, {expected[0]}, {expected[1]}), got {data.shape}")
        return Tensor(data.astype(self.dtype, copy=False))

    def embed(self, signal, stats_sink: Optional[list] = None) -> Tensor:
        """Pooled (B, D) representation in front of the head."""
        x_in = self._as_input(signal)
        batch = x_in.shape[0]
        x = add(self.encoder(x_in, self.training, stats_sink), self.pe)
        expected = (batch, self.seq_len, self.config.d_model)
        for i, layer in enumerate(self.layers):
            x = layer(x, self.training, self.dropout_rng)
            if checked_mode() and x.shape != expected:
                raise DimensionError(f"layer {i} produced {x.shape}, expected {expected}")
        return mean(x, axis=1)

    def forward(self, signal, stats_sink: Optional[list] = None) -> Tensor:
        """(B, C_lead, T) -> logits (B, n_classes)"""
        return self.head(self.embed(signal, stats_sink))

    __call__ = forward

    def describe(self) -> dict:
        cfg = self.config
        return {
            "n_layers": cfg.n_layers,
            "d_model": cfg.d_model,
            "d_inner": cfg.d_inner,
            "ssm_state": cfg.ssm_state,
            "conv_kernel": cfg.conv_kernel,
            "encoder": [list(b) for b in cfg.encoder] if cfg.use_encoder else None,
            "sequence_length": self.seq_len,
            "n_classes": cfg.n_classes,
            "dtype": self.dtype_name,
        }


def count_params(*layers) -> int:
    """Exact learnable-scalar count of layers exposing named_parameters(prefix)."""
    return int(sum(t.size for layer in layers for _, t in layer.named_parameters("")))


def count_params_flops(model: EcgMambaModel, input_shape: Sequence[int]) -> Tuple[int, int]:
    """(param count, FLOPs of one inference-mode forward pass at input_shape)."""
    was_training = model.training
    model.eval()
    try:
        with FlopCounter() as counter:
            model.forward(np.zeros(tuple(input_shape), dtype=model.dtype))
    finally:
        model.training = was_training
    params = model.num_params()
    logger.info(f"[MODEL] params={params:,} flops={counter.total:,} at input {tuple(input_shape)}")
    return params, counter.total


# =============================================================================
# Checkpoint container
#   b"ECGM0001" | u32 manifest_len | manifest (canonical JSON)
#   | u32 count | count x (u32 name_len | name | u64 payload_len | TSR1 record)
# =============================================================================
def save_checkpoint(path: str, model: EcgMambaModel, class_names: Sequence[str], extra: Optional[dict] = None):
    tensors = [(name, t.data) for name, t in model.named_parameters()]
    tensors += list(model.named_buffers().items())
    manifest = {
        "config": model.config.to_dict(),
        "dtype": model.dtype_name,
        "class_names": list(class_names),
        "tensors": [name for name, _ in tensors],
        "extra": extra or {},
    }
    manifest_bytes = canonical_json(manifest).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(manifest_bytes)), manifest_bytes,
             struct.pack("<I", len(tensors))]
    for name, data in tensors:
        payload = tensor_to_bytes(data)
        encoded = name.encode("utf-8")
        parts += [struct.pack("<I", len(encoded)), encoded, struct.pack("<Q", len(payload)), payload]

    ensure_parent(path)
    with open(path, "wb") as f:
        f.write(b"".join(parts))
    logger.info(f"[CKPT] Saved {len(tensors)} tensors to {path}")


def _take(buf: bytes, offset: int, n: int, what: str) -> Tuple[bytes, int]:
    if len(buf) - offset < n:
        raise LengthError(f"checkpoint truncated while reading {what}")
    return buf[offset:offset + n], offset + n


def load_checkpoint(path: str) -> Tuple[EcgMambaModel, List[str], dict]:
    """Returns (model in eval mode, class names, manifest)."""
    with open(path, "rb") as f:
        buf = f.read()
    magic, offset = _take(buf, 0, len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an ECGM0001 checkpoint (magic {magic!r})")
    raw, offset = _take(buf, offset, 4, "manifest length")
    manifest_bytes, offset = _take(buf, offset, struct.unpack("<I", raw)[0], "manifest")
    try:
        manifest = json.loads(manifest_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt manifest: {e}")

    raw, offset = _take(buf, offset, 4, "tensor count")
    stored: Dict[str, np.ndarray] = {}
    for _ in range(struct.unpack("<I", raw)[0]):
        raw, offset = _take(buf, offset, 4, "name length")
        name, offset = _take(buf, offset, struct.unpack("<I", raw)[0], "name")
        raw, offset = _take(buf, offset, 8, "payload length")
        payload, offset = _take(buf, offset, struct.unpack("<Q", raw)[0], "tensor payload")
        tensor, _ = tensor_from_bytes(payload)
        stored[name.decode("utf-8")] = tensor.data

    cfg = ModelConfig.from_dict(manifest["config"])
    model = EcgMambaModel(cfg, dtype=manifest.get("dtype", "f64"))
    for name, t in model.named_parameters():
        if name not in stored:
            raise FormatError(f"{path}: missing tensor '{name}'")
        if stored[name].shape != t.shape:
            raise FormatError(f"{path}: tensor '{name}' has shape {stored[name].shape}, expected {t.shape}")
        t.data = stored[name].astype(model.dtype)
    for i, (_, bn) in enumerate(model.encoder.blocks):
        for buffer in ("running_mean", "running_var"):
            key = f"encoder.{i}.bn.{buffer}"
            if key not in stored:
                raise FormatError(f"{path}: missing buffer '{key}'")
            setattr(bn, buffer, stored[key].astype(np.float64))
    logger.info(f"[CKPT] Loaded {len(stored)} tensors from {path}")
    return model.eval(), list(manifest.get("class_names", [])), manifest
