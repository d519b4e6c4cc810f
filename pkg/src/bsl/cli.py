"""Command-line interface: train, evaluate, leakage-report, dp-sweep, bench-conv."""

from __future__ import annotations

import os

if os.environ.get("BSL_DETERMINISTIC"):
    # pin reduction order before any BLAS/JIT thread pool spins up
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, "1")

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench import bench_conv
from .config import ExperimentConfig, config_to_dict, load_config, save_config
from .data import ensure_dataset, load_dataset
from .dp import DpConfig, rr_keep_probability
from .errors import BslError
from .leakage import compute_leakage_report, export_feature_maps
from .model import get_preset
from .nn import SgdConfig, softmax_cross_entropy
from .reports import (
    write_bench_csv,
    write_dp_sweep_csv,
    write_history_csv,
    write_json,
)
from .session import ClientSession, restore_halves, run_session
from .wire import SyncMessage, load_checkpoint


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--preset", help="model preset name")
    p.add_argument("--lambda", dest="lam", type=float,
                   help="task-loss weight; 1-lambda weights the leak loss")
    p.add_argument("--leak-metric", choices=("ssim", "dcor"))
    p.add_argument("--dp", help="dp mechanism: none, sb, db, rr")
    p.add_argument("--epsilon", type=float, help="dp epsilon for sb/db")
    p.add_argument("--p", type=float, help="keep probability for rr")
    p.add_argument("--transport", choices=("inproc", "tcp"))
    p.add_argument("--host", help="server host for tcp transport")
    p.add_argument("--port", type=int, help="server port; 0 picks one")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--train-size", type=int)
    p.add_argument("--test-size", type=int)
    p.add_argument("--data-dir", help="IDX dataset directory (BSL_DATA_DIR also works)")


def _merge_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    updates = {}
    for attr, key in (
        ("seed", "seed"), ("out", "out"), ("preset", "preset"), ("lam", "lam"),
        ("leak_metric", "leak_metric"), ("transport", "transport"),
        ("host", "host"), ("port", "port"), ("epochs", "epochs"),
        ("batch_size", "batch_size"), ("train_size", "train_size"),
        ("test_size", "test_size"), ("data_dir", "data_dir"),
    ):
        v = getattr(args, attr, None)
        if v is not None:
            updates[key] = v
    dp = cfg.dp
    if getattr(args, "dp", None) is not None:
        dp = replace(dp, kind=args.dp)
        dp.__post_init__()
    if getattr(args, "epsilon", None) is not None:
        dp = replace(dp, epsilon=args.epsilon)
    if getattr(args, "p", None) is not None:
        dp = replace(dp, p=args.p)
    return replace(cfg, dp=dp, **updates)


def _resolve_data(cfg: ExperimentConfig, generate: bool = True) -> dict:
    """Load the dataset, rendering the synthetic corpus when nothing is on disk."""
    data_dir = cfg.data_dir or os.environ.get("BSL_DATA_DIR") or "data"
    if generate:
        ensure_dataset(data_dir)
    return load_dataset(data_dir)


def _out_dir(cfg: ExperimentConfig, fallback: str) -> Path:
    out = Path(cfg.out or fallback)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _merge_config(args)
    out = _out_dir(cfg, f"out/train-{cfg.preset}")
    cfg = replace(cfg, out=str(out))
    cfg.validate()
    dataset = _resolve_data(cfg)
    report = run_session(cfg, dataset)
    save_config(out / "config.json", cfg)
    write_json(out / "run-report.json", report.to_dict())
    write_history_csv(out / "history.csv", report.to_dict())
    for e in report.epochs:
        print(
            f"epoch {e['epoch']}: train_loss={e['train_loss']:.4f} "
            f"val_loss={e['val_loss']:.4f} val_acc={e['val_accuracy']:.4f}"
        )
    print(f"test_accuracy={report.test_accuracy:.4f} (best epoch {report.best_epoch})")
    print(f"outputs in {out}")
    return 0


def _load_for_eval(args: argparse.Namespace) -> tuple[ExperimentConfig, dict]:
    cfg = _merge_config(args)
    out = Path(cfg.out or "")
    ckpt_path = getattr(args, "checkpoint", None) or (out / "checkpoint.bsl" if cfg.out else None)
    if not ckpt_path or not Path(ckpt_path).exists():
        raise BslError(
            "no checkpoint: pass --checkpoint FILE or --out DIR from a train run"
        )
    saved_cfg = out / "config.json" if cfg.out else None
    if args.config is None and saved_cfg and saved_cfg.exists():
        base = load_config(saved_cfg)
        ns = argparse.Namespace(**{**vars(args), "config": None})
        del ns  # flags already merged once; reuse the saved run config instead
        cfg = replace(base, out=cfg.out)
    return cfg, load_checkpoint(ckpt_path)


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg, arrays = _load_for_eval(args)
    cfg.validate()
    dataset = _resolve_data(cfg)
    client, server = restore_halves(cfg, arrays)
    session = _offline_session(cfg, client)
    x, y = dataset["x_test"][: cfg.test_size], dataset["y_test"][: cfg.test_size]
    total, correct = 0.0, 0
    for lo in range(0, x.shape[0], cfg.batch_size):
        xb, yb = x[lo : lo + cfg.batch_size], y[lo : lo + cfg.batch_size].astype(np.int64)
        a_send, _ = session.transmit_activation(xb, training=False)
        logits, _ = server.forward(a_send, training=False)
        loss, _ = softmax_cross_entropy(logits, yb)
        total += loss * xb.shape[0]
        correct += int((np.argmax(logits, axis=1) == yb).sum())
    result = {
        "preset": cfg.preset,
        "test_accuracy": correct / x.shape[0],
        "test_loss": total / x.shape[0],
        "num_images": int(x.shape[0]),
        "dp": {"kind": cfg.dp.kind, "epsilon": cfg.dp.epsilon, "p": cfg.dp.p},
    }
    out = _out_dir(cfg, f"out/eval-{cfg.preset}")
    write_json(out / "eval-report.json", result)
    print(f"test_accuracy={result['test_accuracy']:.4f} test_loss={result['test_loss']:.4f}")
    return 0


def _offline_session(cfg: ExperimentConfig, client) -> ClientSession:
    """A client session with no transport, for local forwards only."""
    from .dp import make_noise_rng

    sync = SyncMessage(cfg.batch_size, cfg.lr, cfg.epochs, get_preset(cfg.preset).split_shape)
    return ClientSession(
        client, transport=None, sync=sync, lam=cfg.lam,
        leak_metric=cfg.leak_metric, dp=cfg.dp,
        dp_rng=make_noise_rng(np.random.SeedSequence(entropy=[cfg.seed, cfg.dp.seed])),
    )


def cmd_leakage_report(args: argparse.Namespace) -> int:
    cfg = _merge_config(args)
    ckpt = getattr(args, "checkpoint", None)
    if ckpt is None and cfg.out and (Path(cfg.out) / "checkpoint.bsl").exists():
        ckpt = Path(cfg.out) / "checkpoint.bsl"
    cfg.validate()
    dataset = _resolve_data(cfg)
    if ckpt:
        client, _ = restore_halves(cfg, load_checkpoint(ckpt))
    else:
        from .model import build_halves

        client, _ = build_halves(
            get_preset(cfg.preset), np.random.SeedSequence(cfg.seed),
            SgdConfig(cfg.lr, cfg.momentum, cfg.weight_decay),
        )
        print("note: no checkpoint given; scoring a freshly initialized client")
    n = min(args.images, dataset["x_test"].shape[0])
    x = dataset["x_test"][:n]
    session = _offline_session(cfg, client)
    a_send, _ = session.transmit_activation(x, training=False)
    if a_send.ndim != 4:
        raise BslError(f"split activations are flat {a_send.shape}; nothing to image")
    report = compute_leakage_report(x, a_send)
    out = _out_dir(cfg, f"out/leakage-{cfg.preset}")
    doc = {
        "preset": cfg.preset,
        "split_shape": list(get_preset(cfg.preset).split_shape),
        "dp": {"kind": cfg.dp.kind, "epsilon": cfg.dp.epsilon, "p": cfg.dp.p},
        **report.to_dict(),
    }
    write_json(out / "leakage.json", doc)
    paths = export_feature_maps(out / "feature_maps", x[0, 0], a_send[0])
    print(
        f"kl_d={report.kl_d:.4f} ssim={report.ssim:.4f} dcor={report.dcor:.4f} "
        f"mse={report.mse:.6f} over {n} images"
    )
    print(f"wrote {out / 'leakage.json'} and {len(paths)} pgm maps")
    return 0


def cmd_dp_sweep(args: argparse.Namespace) -> int:
    cfg = _merge_config(args)
    mechanisms = [m.strip() for m in args.mechanisms.split(",") if m.strip()]
    epsilons = [float(e) for e in args.epsilons.split(",")]
    dataset = _resolve_data(cfg)
    out = _out_dir(cfg, f"out/dp-sweep-{cfg.preset}")
    rows = []
    for mech in mechanisms:
        for eps in epsilons:
            dp = DpConfig(kind=mech, epsilon=eps, seed=cfg.dp.seed)
            if dp.kind == "rr":
                dp = replace(dp, p=rr_keep_probability(eps))
            cell = replace(cfg, dp=dp, out=None)
            cell.validate()
            report = run_session(cell, dataset)
            rows.append(
                {
                    "mechanism": dp.kind,
                    "epsilon": eps,
                    "p": dp.p if dp.kind == "rr" else None,
                    "test_accuracy": report.test_accuracy,
                }
            )
            print(
                f"{dp.kind} eps={eps}: test_accuracy={report.test_accuracy:.4f}"
            )
    write_dp_sweep_csv(out / "dp-sweep.csv", rows)
    print(f"wrote {out / 'dp-sweep.csv'}")
    return 0


def cmd_bench_conv(args: argparse.Namespace) -> int:
    cfg = _merge_config(args)
    kernels = tuple(int(k) for k in args.kernels.split(","))
    rows = bench_conv(
        kernels=kernels,
        in_channels=args.channels,
        image=args.image,
        filters=args.filters,
        reps=args.reps,
        seed=cfg.seed,
    )
    out = _out_dir(cfg, "out/bench-conv")
    write_bench_csv(out / "bench.csv", rows)
    for r in rows:
        print(
            f"k={r['kernel']}: float {r['float_ms']:.3f} ms, binary {r['binary_ms']:.3f} ms "
            f"({r['speedup']:.1f}x), payload {r['size_ratio']:.1f}x smaller"
        )
    print(f"wrote {out / 'bench.csv'}")
    return 0


def cmd_make_dataset(args: argparse.Namespace) -> int:
    cfg = _merge_config(args)
    data_dir = cfg.data_dir or os.environ.get("BSL_DATA_DIR") or "data"
    d = ensure_dataset(
        data_dir,
        n_train=args.n_train,
        n_test=args.n_test,
        seed=cfg.seed if cfg.seed is not None else 1234,
    )
    info = load_dataset(d)["info"]
    print(f"dataset ready in {d}: {info['train']} train / {info['test']} test images")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bsl",
        description="Binarized split learning: train over a split protocol, "
        "measure input leakage, and benchmark XNOR kernels.",
    )
    parser.add_argument("--version", action="version", version=f"bsl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run split training over a transport")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="score the best checkpoint on the test set")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint file (default: OUT/checkpoint.bsl)")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("leakage-report", help="raw-vs-activation metrics plus PGM maps")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint file to score")
    p.add_argument("--images", type=int, default=100, help="test images to sample")
    p.set_defaults(fn=cmd_leakage_report)

    p = sub.add_parser("dp-sweep", help="train per (mechanism, epsilon) cell")
    _add_common(p)
    p.add_argument("--mechanisms", default="sb,db,rr", help="comma list of mechanisms")
    p.add_argument("--epsilons", default="1,2,4", help="comma list of epsilon values")
    p.set_defaults(fn=cmd_dp_sweep)

    p = sub.add_parser("bench-conv", help="binary vs float conv micro-benchmark")
    _add_common(p)
    p.add_argument("--kernels", default="2,3,5", help="comma list of kernel sizes")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--image", type=int, default=32)
    p.add_argument("--filters", type=int, default=64)
    p.add_argument("--reps", type=int, default=10)
    p.set_defaults(fn=cmd_bench_conv)

    p = sub.add_parser("make-dataset", help="render the synthetic IDX corpus")
    _add_common(p)
    p.add_argument("--n-train", type=int, default=12000)
    p.add_argument("--n-test", type=int, default=2000)
    p.set_defaults(fn=cmd_make_dataset)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except BslError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
