import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Tuple

from jsonschema import ValidationError, validate

from src.errors import ConfigError

# =============================================================================
# 1) JSON SCHEMA DEFINITION
#    - Mirror every key accepted in config.json here.
#    - additionalProperties is false everywhere: an unknown (typo'd) key is an
#      error, never silently ignored.
# =============================================================================
_POSITIVE_INT = {"type": "integer", "minimum": 1}

MODEL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "n_layers":       _POSITIVE_INT,
        "d_model":        {"type": "integer", "minimum": 2},
        "ssm_state":      _POSITIVE_INT,
        "conv_kernel":    _POSITIVE_INT,
        "expand":         _POSITIVE_INT,
        "encoder": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "array", "items": _POSITIVE_INT, "minItems": 3, "maxItems": 3},
        },
        "n_leads":        {"type": "integer", "minimum": 1, "maximum": 12},
        "use_encoder":    {"type": "boolean"},
        "use_ln":         {"type": "boolean"},
        "use_ffn":        {"type": "boolean"},
        "dropout":        {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "ffn_hidden":     {"type": ["integer", "null"], "minimum": 1},
        "ffn_kernel":     _POSITIVE_INT,
        "discretization": {"type": "string", "enum": ["euler_b", "zoh_b"]},
        "scan_strategy":  {"type": "string", "enum": ["recompute", "cache_all"]},
        "checkpoint_layers": {"type": "boolean"},
        "ln_eps":         {"type": "number", "exclusiveMinimum": 0},
        "bn_momentum":    {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "dt_min":         {"type": "number", "exclusiveMinimum": 0},
        "dt_max":         {"type": "number", "exclusiveMinimum": 0},
    },
}

TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "batch_size":    _POSITIVE_INT,
        "epochs":        _POSITIVE_INT,
        "lr_peak":       {"type": "number", "exclusiveMinimum": 0},
        "warmup_steps":  _POSITIVE_INT,
        "schedule":      {"type": "string", "enum": ["constant_after_warmup", "cosine"]},
        "weight_decay":  {"type": "number", "minimum": 0},
        "betas": {
            "type": "array",
            "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "minItems": 2,
            "maxItems": 2,
        },
        "adam_eps":      {"type": "number", "exclusiveMinimum": 0},
        "grad_clip":     {"type": "number", "minimum": 0},
        "seed":          {"type": "integer", "minimum": 0},
        "dtype":         {"type": "string", "enum": ["f32", "f64"]},
    },
}

DATA_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "dataset_dir":    {"type": "string"},
        "target_hz":      _POSITIVE_INT,
        "target_seconds": _POSITIVE_INT,
        "n_folds":        {"type": "integer", "minimum": 3},
        "split_seed":     {"type": "integer", "minimum": 0},
        "skip_unlabeled": {"type": "boolean"},
        "train_folds":    {"type": "array", "items": _POSITIVE_INT, "minItems": 1},
        "val_folds":      {"type": "array", "items": _POSITIVE_INT, "minItems": 1},
        "test_folds":     {"type": "array", "items": _POSITIVE_INT},
    },
}

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model":      MODEL_SCHEMA,
        "train":      TRAIN_SCHEMA,
        "data":       DATA_SCHEMA,
        "output_dir": {"type": "string"},
        "workers":    _POSITIVE_INT,
        "log_level": {
            "type": "string",
            "enum": ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        },
        "log_file":   {"type": ["string", "null"]},
    },
}


# =============================================================================
# 2) Logging Helper
#    - Call this once, after instantiating RunConfig, to configure console
#      (+ file when log_file is set).
# =============================================================================
def setup_logging(log_level: str, log_file: Optional[str] = None):
    fmt = "%(asctime)s %(levelname)s %(name)s %(message)s"
    handlers = [logging.StreamHandler()]
    if log_file:
        os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(
        level=getattr(logging, log_level.upper(), logging.INFO),
        format=fmt,
        handlers=handlers,
        force=True,
    )


# =============================================================================
# 3) Typed sections
# =============================================================================
def _from_dict(cls, raw: dict):
    known = {f.name for f in fields(cls) if f.init}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    return cls(**raw)


@dataclass
class ModelConfig:
    """
    Architecture hyperparameters.

    N=32, K=4, E=2 and eight Mamba layers are the published settings; D, the
    encoder widths and the FFN shape are our choices.
    """
    n_classes: int = 5
    n_leads: int = 12
    signal_length: int = 1000
    n_layers: int = 8
    d_model: int = 128
    ssm_state: int = 32
    conv_kernel: int = 4
    expand: int = 2
    encoder: Optional[List[Tuple[int, int, int]]] = None
    use_encoder: bool = True
    use_ln: bool = True
    use_ffn: bool = True
    dropout: float = 0.0
    ffn_hidden: Optional[int] = None
    ffn_kernel: int = 3
    discretization: str = "euler_b"
    scan_strategy: str = "recompute"
    checkpoint_layers: bool = True
    ln_eps: float = 1e-5
    bn_momentum: float = 0.1
    dt_min: float = 1e-3
    dt_max: float = 0.1

    def __post_init__(self):
        if self.encoder is None:
            self.encoder = [(64, 5, 5), (128, 5, 5), (self.d_model, 4, 4)]
        self.encoder = [tuple(int(v) for v in block) for block in self.encoder]
        if self.ffn_hidden is None:
            self.ffn_hidden = 2 * self.d_model

        for name in ("n_classes", "n_leads", "signal_length", "n_layers", "d_model",
                     "ssm_state", "conv_kernel", "expand", "ffn_hidden", "ffn_kernel"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 1 <= self.n_leads <= 12:
            raise ConfigError(f"n_leads must lie in 1..12, got {self.n_leads}")
        if self.d_model % 2:
            raise ConfigError(f"d_model must be even for the positional encoding, got {self.d_model}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.discretization not in ("euler_b", "zoh_b"):
            raise ConfigError(f"unknown discretization '{self.discretization}'")
        if self.scan_strategy not in ("recompute", "cache_all"):
            raise ConfigError(f"unknown scan_strategy '{self.scan_strategy}'")
        if not 0.0 < self.dt_min <= self.dt_max:
            raise ConfigError(f"need 0 < dt_min <= dt_max, got {self.dt_min}, {self.dt_max}")
        if self.use_encoder and self.encoder[-1][0] != self.d_model:
            raise ConfigError(
                f"last encoder block must output d_model={self.d_model} channels, got {self.encoder[-1][0]}"
            )
        # raises when the stride chain cannot reach L >= 1
        self.sequence_length()

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    def sequence_length(self) -> int:
        """Length L of the token sequence entering the Mamba layers."""
        length = self.signal_length
        if not self.use_encoder:
            return length
        for i, (_, kernel, stride) in enumerate(self.encoder):
            if kernel > length:
                raise ConfigError(
                    f"signal_length {self.signal_length} too short: encoder block {i} "
                    f"(kernel {kernel}) sees only {length} samples"
                )
            length = (length - kernel) // stride + 1
        return length

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = [list(block) for block in self.encoder]
        return d

    @staticmethod
    def from_dict(raw: dict) -> "ModelConfig":
        return _from_dict(ModelConfig, raw)


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 10
    lr_peak: float = 1e-3
    warmup_steps: int = 500
    schedule: str = "constant_after_warmup"
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    dtype: str = "f32"

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_steps < 1:
            raise ConfigError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.schedule not in ("constant_after_warmup", "cosine"):
            raise ConfigError(f"unknown schedule '{self.schedule}'")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"unknown dtype '{self.dtype}'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @staticmethod
    def from_dict(raw: dict) -> "TrainConfig":
        return _from_dict(TrainConfig, raw)


@dataclass
class DataConfig:
    dataset_dir: str = "data/synthetic"
    target_hz: int = 100
    target_seconds: int = 10
    n_folds: int = 10
    split_seed: int = 0
    skip_unlabeled: bool = True
    train_folds: List[int] = field(default_factory=lambda: list(range(1, 9)))
    val_folds: List[int] = field(default_factory=lambda: [9])
    test_folds: List[int] = field(default_factory=lambda: [10])

    def __post_init__(self):
        folds = [set(self.train_folds), set(self.val_folds), set(self.test_folds)]
        if folds[0] & folds[1] or folds[0] & folds[2] or folds[1] & folds[2]:
            raise ConfigError("train/val/test folds must be disjoint")
        if max(max(f) for f in folds if f) > self.n_folds:
            raise ConfigError(f"fold ids must lie in 1..{self.n_folds}")

    @property
    def signal_length(self) -> int:
        return self.target_hz * self.target_seconds

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(raw: dict) -> "DataConfig":
        return _from_dict(DataConfig, raw)


# =============================================================================
# 4) RunConfig
#    - Use RunConfig.from_json("/path/to/config.json", overrides) to load & validate.
#    - Overrides are dotted keys ("train.epochs") merged before validation.
#    - signal_length is derived from the data section; n_classes from the
#      dataset taxonomy at train time.
# =============================================================================
def apply_overrides(raw: dict, overrides: Optional[dict]) -> dict:
    merged = copy.deepcopy(raw)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = merged
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    return merged


class RunConfig:
    """
    Merged view of ModelConfig + TrainConfig + DataConfig + output settings.
    """

    @staticmethod
    def from_json(path: str, overrides: Optional[dict] = None) -> "RunConfig":
        """
        Factory: load JSON from 'path', apply overrides, validate against the
        schema and return a RunConfig. Raises ConfigError on failure.
        """
        if not os.path.isfile(path):
            raise FileNotFoundError(f"Config file not found: {path}")

        with open(path, "r", encoding="utf-8") as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"Invalid JSON in {path}: {e}")

        return RunConfig.from_dict(raw, overrides)

    @staticmethod
    def from_dict(raw: dict, overrides: Optional[dict] = None) -> "RunConfig":
        merged = apply_overrides(raw, overrides)
        try:
            validate(instance=merged, schema=RUN_CONFIG_SCHEMA)
        except ValidationError as err:
            location = ".".join(str(p) for p in err.absolute_path) or "<root>"
            raise ConfigError(f"config validation error at {location}: {err.message}")
        return RunConfig(merged)

    def __init__(self, cfg: dict):
        self.raw = copy.deepcopy(cfg)

        self.data = DataConfig.from_dict(cfg.get("data", {}))
        self.train = TrainConfig.from_dict(cfg.get("train", {}))

        model_raw = dict(cfg.get("model", {}))
        model_raw["signal_length"] = self.data.signal_length
        self.model = ModelConfig.from_dict(model_raw)

        self.output_dir = cfg.get("output_dir", "runs/default")
        self.workers = int(cfg.get("workers", 1))
        self.log_level = cfg.get("log_level", "INFO")
        self.log_file = cfg.get("log_file")

    def with_classes(self, n_classes: int) -> "RunConfig":
        """Bind the class count found in the dataset taxonomy."""
        model_raw = self.model.to_dict()
        model_raw["n_classes"] = n_classes
        self.model = ModelConfig.from_dict(model_raw)
        return self

    def to_dict(self) -> dict:
        """Effective config in the run-config schema (re-loadable)."""
        model = self.model.to_dict()
        model.pop("signal_length")
        model.pop("n_classes")
        return {
            "model": model,
            "train": self.train.to_dict(),
            "data": self.data.to_dict(),
            "output_dir": self.output_dir,
            "workers": self.workers,
            "log_level": self.log_level,
            "log_file": self.log_file,
        }

    def enable_logging(self):
        """
        Configure Python's root logger using log_level and log_file.
        Call this once early in your main application.
        """
        setup_logging(self.log_level, self.log_file)
