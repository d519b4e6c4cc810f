"""Experiment configuration: defaults, JSON round trip, validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .dp import DpConfig
from .errors import ConfigError
from .model import get_preset

TRANSPORTS = ("inproc", "tcp")
LEAK_METRICS = ("ssim", "dcor")


@dataclass
class ExperimentConfig:
    """Everything a training or evaluation run needs, minus the dataset bytes."""

    preset: str = "1b-sl"
    seed: int = 0
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-2
    momentum: float = 0.8
    weight_decay: float = 5e-4
    lam: float = 1.0  # weight on the task loss; 1-lam weights the leak loss
    leak_metric: str = "ssim"
    dp: DpConfig = field(default_factory=DpConfig)
    transport: str = "inproc"
    host: str = "127.0.0.1"
    port: int = 0
    data_dir: str | None = None
    train_size: int = 10000
    test_size: int = 2000
    probe_images: int = 64
    out: str | None = None

    def validate(self) -> None:
        spec = get_preset(self.preset)  # raises on unknown preset
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if self.leak_metric not in LEAK_METRICS:
            raise ConfigError(f"leak metric {self.leak_metric!r} not in {LEAK_METRICS}")
        if self.transport not in TRANSPORTS:
            raise ConfigError(f"transport {self.transport!r} not in {TRANSPORTS}")
        self.dp.validate()
        if not spec.is_binarized:
            if self.dp.kind != "none":
                raise ConfigError(
                    f"dp mechanism {self.dp.kind!r} needs a binarized split layer; "
                    f"preset {self.preset!r} sends full-precision activations"
                )
            if self.lam < 1.0:
                raise ConfigError(
                    f"leak-restricted training (lambda {self.lam}) needs a binarized "
                    f"split layer; preset {self.preset!r} is full precision"
                )
        if self.train_size < self.batch_size:
            raise ConfigError(
                f"train_size {self.train_size} smaller than batch_size {self.batch_size}"
            )


_SCHEMA = {
    "model": {"preset"},
    "train": {"seed", "epochs", "batch_size", "lr", "momentum", "weight_decay"},
    "leak": {"lambda", "metric"},
    "dp": {"kind", "epsilon", "p", "seed"},
    "server": {"host", "port"},
    "data": {"dir", "train_size", "test_size", "probe_images"},
    "transport": None,  # scalar
    "out": None,
}


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "model": {"preset": cfg.preset},
        "train": {
            "seed": cfg.seed,
            "epochs": cfg.epochs,
            "batch_size": cfg.batch_size,
            "lr": cfg.lr,
            "momentum": cfg.momentum,
            "weight_decay": cfg.weight_decay,
        },
        "leak": {"lambda": cfg.lam, "metric": cfg.leak_metric},
        "dp": {k: v for k, v in asdict(cfg.dp).items()},
        "server": {"host": cfg.host, "port": cfg.port},
        "data": {
            "dir": cfg.data_dir,
            "train_size": cfg.train_size,
            "test_size": cfg.test_size,
            "probe_images": cfg.probe_images,
        },
        "transport": cfg.transport,
        "out": cfg.out,
    }


def config_from_dict(d: dict) -> ExperimentConfig:
    """Build a config from nested JSON, rejecting unknown keys by full path."""
    for key, sub in d.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        allowed = _SCHEMA[key]
        if allowed is None:
            continue
        if not isinstance(sub, dict):
            raise ConfigError(f"config section {key!r} must be an object")
        for k in sub:
            if k not in allowed:
                raise ConfigError(f"unknown config key {key}.{k!r}")
    cfg = ExperimentConfig()
    model = d.get("model", {})
    train = d.get("train", {})
    leak = d.get("leak", {})
    dp = d.get("dp", {})
    server = d.get("server", {})
    data = d.get("data", {})
    cfg = replace(
        cfg,
        preset=model.get("preset", cfg.preset),
        seed=int(train.get("seed", cfg.seed)),
        epochs=int(train.get("epochs", cfg.epochs)),
        batch_size=int(train.get("batch_size", cfg.batch_size)),
        lr=float(train.get("lr", cfg.lr)),
        momentum=float(train.get("momentum", cfg.momentum)),
        weight_decay=float(train.get("weight_decay", cfg.weight_decay)),
        lam=float(leak.get("lambda", cfg.lam)),
        leak_metric=leak.get("metric", cfg.leak_metric),
        dp=DpConfig(
            kind=dp.get("kind", "none"),
            epsilon=float(dp.get("epsilon", 2.0)),
            p=float(dp.get("p", 0.5)),
            seed=int(dp.get("seed", 0)),
        ),
        transport=d.get("transport", cfg.transport),
        host=server.get("host", cfg.host),
        port=int(server.get("port", cfg.port)),
        data_dir=data.get("dir", cfg.data_dir),
        train_size=int(data.get("train_size", cfg.train_size)),
        test_size=int(data.get("test_size", cfg.test_size)),
        probe_images=int(data.get("probe_images", cfg.probe_images)),
        out=d.get("out", cfg.out),
    )
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    return config_from_dict(d)


def save_config(path: str | Path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")
