import json
import os
import sys

"""
Generates a synthetic 12-lead dataset plus a small run config pointing at it.
Useful for smoke-testing training and evaluation.

Usage:
  python scripts/generate_sample.py data/synthetic 128 5
This writes 128 records with 5 classes to data/synthetic/ and a matching
config to data/synthetic/smoke.json.
"""

import argparse

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from src.config import setup_logging  # noqa: E402
from src.data_handler import synth_dataset  # noqa: E402


def smoke_config(dataset_dir: str, output_dir: str, leads: int) -> dict:
    return {
        "model": {
            "n_layers": 2,
            "d_model": 32,
            "ssm_state": 32,
            "conv_kernel": 4,
            "expand": 2,
            "encoder": [[32, 5, 5], [32, 5, 5], [32, 4, 4]],
            "n_leads": leads,
        },
        "train": {"batch_size": 16, "epochs": 2, "warmup_steps": 10, "dtype": "f32"},
        "data": {"dataset_dir": dataset_dir},
        "output_dir": output_dir,
    }


def main(out_dir: str, records: int, classes: int, leads: int, snr: float, seed: int):
    setup_logging("INFO")
    synth_dataset(out_dir, n_records=records, n_classes=classes, n_leads=leads, seed=seed, snr=snr)
    config_path = os.path.join(out_dir, "smoke.json")
    with open(config_path, "w", encoding="utf-8") as f:
        json.dump(smoke_config(out_dir, os.path.join("runs", "smoke"), leads), f, indent=2, sort_keys=True)
    print(f"Generated {records} records in {out_dir} and {config_path}.")


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("out_dir", help="dataset directory, e.g. data/synthetic")
    parser.add_argument("records", type=int, help="number of records to generate")
    parser.add_argument("classes", type=int, help="number of classes")
    parser.add_argument("--leads", type=int, default=12)
    parser.add_argument("--snr", type=float, default=1.0)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    main(args.out_dir, args.records, args.classes, args.leads, args.snr, args.seed)
