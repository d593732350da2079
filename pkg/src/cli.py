"""
Command-line surface.

    python main.py train  --config config.json [--epochs N] [--layers N] [--seed S]
                          [--no-encoder] [--no-ln] [--no-ffn] [--workers W]
                          [--dataset DIR] [--out DIR]
    python main.py eval   --checkpoint runs/x/model.ckpt --dataset DIR [--split test]
    python main.py verify [--filter scan] [--out DIR]
    python main.py bench  [--lengths 256,512,1024,2048,4096] [--out DIR]
    python main.py synth  --out DIR [--records 128] [--classes 5] ...
    python main.py export-embeddings --checkpoint CKPT --dataset DIR --out FILE
    python main.py info   [--config FILE | --checkpoint CKPT]

Exit codes: 0 success, 1 failed verification or diverged training,
2 configuration / data errors.
"""

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import pandas as pd
from dotenv import load_dotenv

from src.benchmark import DEFAULT_LENGTHS, loglog_slope, run_bench, write_bench
from src.config import DataConfig, RunConfig, setup_logging
from src.data_handler import TAXONOMIES, DataHandler, EcgDataset, multihot_to_labels, synth_dataset
from src.errors import ConfigError, TrainingDivergedError
from src.metrics import evaluate_predictions
from src.model import EcgMambaModel, count_params_flops, load_checkpoint
from src.trainer import BEST_CHECKPOINT, Trainer, embed_signals, predict_logits
from src.utils import load_config, parse_int_list, write_canonical_json
from src.verify import run_checks, write_report

logger = logging.getLogger(__name__)

EFFECTIVE_CONFIG = "effective_config.json"
METRICS_JSON = "metrics.json"
METRICS_CSV = "metrics.csv"


# =============================================================================
# Helpers
# =============================================================================
def _overrides(args) -> dict:
    """Dotted config keys from CLI flags (None means 'not given')."""
    return {
        "train.epochs": getattr(args, "epochs", None),
        "train.seed": getattr(args, "seed", None),
        "model.n_layers": getattr(args, "layers", None),
        "model.use_encoder": False if getattr(args, "no_encoder", False) else None,
        "model.use_ln": False if getattr(args, "no_ln", False) else None,
        "model.use_ffn": False if getattr(args, "no_ffn", False) else None,
        "workers": getattr(args, "workers", None),
        "output_dir": getattr(args, "out", None),
        "data.dataset_dir": getattr(args, "dataset", None),
    }


def _eval_split(handler: DataHandler, ds: EcgDataset, split: str) -> EcgDataset:
    if split == "all":
        return ds
    folds = {"train": handler.config.train_folds, "val": handler.config.val_folds,
             "test": handler.config.test_folds}[split]
    part = ds.subset(folds)
    if len(part) == 0:
        raise ConfigError(f"{split} split (folds {folds}) is empty")
    return part


def _data_config(args) -> DataConfig:
    if getattr(args, "config", None):
        return RunConfig.from_json(args.config).data
    return DataConfig()


def _load_for_checkpoint(args):
    model, class_names, _ = load_checkpoint(args.checkpoint)
    handler = DataHandler(_data_config(args), args.dataset)
    ds = handler.load()
    if len(ds.class_names) != model.config.n_classes:
        raise ConfigError(
            f"checkpoint predicts {model.config.n_classes} classes, dataset has {len(ds.class_names)}"
        )
    if ds.signals.shape[1:] != (model.config.n_leads, model.config.signal_length):
        raise ConfigError(
            f"dataset signals {ds.signals.shape[1:]} do not match the checkpoint input "
            f"({model.config.n_leads}, {model.config.signal_length})"
        )
    return model, class_names or ds.class_names, handler, ds


# =============================================================================
# Subcommands
# =============================================================================
def cmd_train(args) -> int:
    config = load_config(args.config, _overrides(args))
    os.makedirs(config.output_dir, exist_ok=True)
    write_canonical_json(os.path.join(config.output_dir, EFFECTIVE_CONFIG), config.to_dict())

    handler = DataHandler(config.data)
    ds = handler.load()
    train_ds, val_ds, test_ds = handler.splits(ds)
    config.with_classes(len(ds.class_names))
    if ds.signals.shape[1] != config.model.n_leads:
        raise ConfigError(f"dataset has {ds.signals.shape[1]} leads, config expects {config.model.n_leads}")

    model = EcgMambaModel(config.model, seed=config.train.seed, dtype=config.train.dtype)
    count_params_flops(model, (1, config.model.n_leads, config.model.signal_length))
    trainer = Trainer(model, config.train, config.output_dir, ds.class_names, config.workers)
    trainer.fit(train_ds, val_ds)

    best, _, _ = load_checkpoint(os.path.join(config.output_dir, BEST_CHECKPOINT))
    trainer.model = best
    report = trainer.evaluate(test_ds if len(test_ds) else val_ds, with_counts=True)
    report.write_json(os.path.join(config.output_dir, METRICS_JSON))
    report.write_csv(os.path.join(config.output_dir, METRICS_CSV))
    logger.info(f"[CLI] Training finished; artifacts in {config.output_dir}")
    print(json.dumps(report.to_dict(), sort_keys=True, indent=2))
    return 0


def cmd_eval(args) -> int:
    model, class_names, handler, ds = _load_for_checkpoint(args)
    part = _eval_split(handler, ds, args.split)
    logits = predict_logits(model, part.signals)
    params, flops = count_params_flops(model, (1,) + part.signals.shape[1:])
    report = evaluate_predictions(logits, part.labels, class_names, params, flops)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    report.write_json(os.path.join(out_dir, METRICS_JSON))
    report.write_csv(os.path.join(out_dir, METRICS_CSV))
    print(json.dumps(report.to_dict(), sort_keys=True, indent=2))
    return 0


def cmd_verify(args) -> int:
    results = run_checks(args.filter)
    if not results:
        raise ConfigError(f"no verification check matches filter '{args.filter}'")
    write_report(results, os.path.join(args.out, "verify.json"))
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  ({r.seconds:.2f}s)")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return 1
    print(f"all {len(results)} checks passed")
    return 0


def cmd_bench(args) -> int:
    lengths = parse_int_list(args.lengths)
    df = run_bench(lengths, repeats=args.repeats)
    path = write_bench(df, os.path.join(args.out, "bench.csv"))
    print(df.to_string(index=False))
    if len(df) >= 2:
        print(f"slope scan={loglog_slope(df['L'], df['scan_ms']):.3f} quad={loglog_slope(df['L'], df['quad_ms']):.3f}")
    logger.info(f"[CLI] Wrote {path}")
    return 0


def cmd_synth(args) -> int:
    class_names = TAXONOMIES[args.taxonomy] if args.taxonomy else None
    manifest = synth_dataset(
        args.out,
        n_records=args.records,
        n_classes=len(class_names) if class_names else args.classes,
        n_leads=args.leads,
        length=args.length,
        seed=args.seed,
        sample_rate_hz=args.rate,
        snr=args.snr,
        co_occurrence=args.co_occurrence,
        n_folds=args.folds,
        class_names=class_names,
    )
    print(f"wrote {len(manifest)} records to {args.out}")
    return 0


def cmd_export_embeddings(args) -> int:
    model, class_names, handler, ds = _load_for_checkpoint(args)
    part = _eval_split(handler, ds, args.split)
    features = embed_signals(model, part.signals)
    df = pd.DataFrame(features, columns=[f"f{i}" for i in range(features.shape[1])])
    df.insert(0, "labels", [multihot_to_labels(v, class_names) for v in part.labels])
    df.insert(0, "id", part.ids)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    df.to_csv(args.out, index=False)
    logger.info(f"[CLI] Exported {len(df)} embeddings of width {features.shape[1]} to {args.out}")
    return 0


def cmd_info(args) -> int:
    if args.checkpoint:
        model, class_names, _ = load_checkpoint(args.checkpoint)
    else:
        config = load_config(args.config, _overrides(args))
        model = EcgMambaModel(config.model, seed=config.train.seed, dtype=config.train.dtype)
        class_names = []
    params, flops = count_params_flops(model, (1, model.config.n_leads, model.config.signal_length))
    summary = model.describe()
    summary.update({"param_count": params, "flop_count": flops, "class_names": class_names})
    print(json.dumps(summary, sort_keys=True, indent=2))
    return 0


# =============================================================================
# Parser
# =============================================================================
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecgmamba", description="BiSSM ECG classifier toolkit")
    parser.add_argument("--log-level", default="INFO", help="logging level for commands without a config")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", default="config.json")
    p.add_argument("--epochs", type=int)
    p.add_argument("--layers", type=int, help="number of Mamba layers")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-encoder", action="store_true", help="replace the ECG encoder by a lead projection")
    p.add_argument("--no-ln", action="store_true", help="drop the LayerNorms")
    p.add_argument("--no-ffn", action="store_true", help="drop the feed-forward sublayers")
    p.add_argument("--workers", type=int)
    p.add_argument("--dataset", help="dataset directory (overrides data.dataset_dir)")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "evaluate a checkpoint"),
        ("export-embeddings", cmd_export_embeddings, "write pooled features as CSV"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", required=True)
        p.add_argument("--config", help="run config supplying preprocessing and fold settings")
        p.add_argument("--split", choices=("train", "val", "test", "all"), default="test" if name == "eval" else "all")
        p.add_argument("--out", required=name == "export-embeddings")
        p.set_defaults(func=func)

    p = sub.add_parser("verify", help="run the property suite")
    p.add_argument("--filter", help="group (tensor, scan, model, metrics) or name substring")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="scan vs quadratic scaling benchmark")
    p.add_argument("--lengths", default=",".join(str(v) for v in DEFAULT_LENGTHS))
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="write a synthetic ECG dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--records", type=int, default=128)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--taxonomy", choices=sorted(TAXONOMIES), help="use a bundled class taxonomy (sets --classes)")
    p.add_argument("--leads", type=int, default=12)
    p.add_argument("--length", type=int, default=1000)
    p.add_argument("--rate", type=int, default=100)
    p.add_argument("--snr", type=float, default=1.0)
    p.add_argument("--co-occurrence", type=float, default=0.2)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("info", help="architecture summary with parameter and FLOP counts")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--config", default="config.json")
    group.add_argument("--checkpoint")
    p.add_argument("--layers", type=int)
    p.add_argument("--no-encoder", action="store_true")
    p.add_argument("--no-ln", action="store_true")
    p.add_argument("--no-ffn", action="store_true")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as e:
        logger.error(f"[CLI] {args.command}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (TrainingDivergedError, FloatingPointError) as e:
        logger.error(f"[CLI] {args.command}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1
