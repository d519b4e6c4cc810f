"""Report writers: JSON documents and fixed-header CSV files."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

HISTORY_COLUMNS = [
    "epoch", "train_loss", "val_loss", "val_accuracy",
    "e2", "kl_d", "ssim", "dcor", "mse", "psnr",
]
DP_SWEEP_COLUMNS = ["mechanism", "epsilon", "p", "test_accuracy"]
BENCH_COLUMNS = [
    "kernel", "in_channels", "image", "filters", "reps",
    "float_ms", "binary_ms", "speedup",
    "float_bytes", "packed_bytes", "size_ratio", "fast_path",
]


def write_json(path: str | Path, obj: dict) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def _write_csv(path: str | Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(c)) for c in columns])


def write_history_csv(path: str | Path, report: dict) -> None:
    """One row per epoch from a run report, leakage aggregates inlined."""
    rows = []
    for e in report["epochs"]:
        leak = e.get("leakage") or {}
        rows.append(
            {
                "epoch": e["epoch"],
                "train_loss": e["train_loss"],
                "val_loss": e["val_loss"],
                "val_accuracy": e["val_accuracy"],
                "e2": e.get("e2"),
                "kl_d": leak.get("kl_d"),
                "ssim": leak.get("ssim"),
                "dcor": leak.get("dcor"),
                "mse": leak.get("mse"),
                "psnr": leak.get("psnr"),
            }
        )
    _write_csv(path, HISTORY_COLUMNS, rows)


def write_dp_sweep_csv(path: str | Path, rows: list[dict]) -> None:
    _write_csv(path, DP_SWEEP_COLUMNS, rows)


def write_bench_csv(path: str | Path, rows: list[dict]) -> None:
    _write_csv(path, BENCH_COLUMNS, rows)
