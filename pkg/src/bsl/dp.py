"""Differential-privacy mechanisms for binarized smashed data.

Deterministic binarization of values in [-1, 1] already satisfies
(epsilon, delta)-DP with delta = exp(-epsilon/2); the mechanisms here trade
accuracy for tighter guarantees: Laplace noise before the sign (stochastic
binarization), Laplace noise after it (double binarization), and randomized
response on the transmitted bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

MECHANISMS = ("none", "sb", "db", "rr")
_ALIASES = {
    "none": "none",
    "sb": "sb",
    "stochastic-binarization": "sb",
    "db": "db",
    "double-binarization": "db",
    "rr": "rr",
    "randomized-response": "rr",
}


def normalize_mechanism(kind: str) -> str:
    """Map a mechanism name or alias to its canonical short form."""
    try:
        return _ALIASES[kind.lower()]
    except KeyError:
        raise ConfigError(f"unknown dp mechanism {kind!r}; expected one of {MECHANISMS}") from None


def delta_for_epsilon(epsilon: float) -> float:
    """Natural (epsilon, delta) bound of deterministic binarization: exp(-epsilon/2)."""
    if epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {epsilon}")
    return math.exp(-epsilon / 2.0)


def epsilon_for_delta(delta: float) -> float:
    """Inverse of delta_for_epsilon: -2 ln(delta) for delta in (0, 1]."""
    if not 0 < delta <= 1:
        raise ConfigError(f"delta must be in (0, 1], got {delta}")
    return -2.0 * math.log(delta)


def db_flip_probability(epsilon: float) -> float:
    """Bit-flip probability of double binarization: 0.5 * exp(-epsilon/2)."""
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon}")
    return 0.5 * math.exp(-epsilon / 2.0)


def rr_epsilon(p: float) -> float:
    """Epsilon of randomized response with keep-probability p: ln((1+p)/(1-p))."""
    if not 0 <= p < 1:
        raise ConfigError(f"keep probability must be in [0, 1), got {p}")
    return math.log((1.0 + p) / (1.0 - p))


def rr_keep_probability(epsilon: float) -> float:
    """Keep-probability matching a target epsilon: (e^eps - 1)/(e^eps + 1)."""
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon}")
    return (math.exp(epsilon) - 1.0) / (math.exp(epsilon) + 1.0)


def rr_flip_probability(p: float) -> float:
    """Unconditional flip probability of randomized response: (1-p)/2."""
    return (1.0 - p) / 2.0


def make_noise_rng(seed: int) -> np.random.Generator:
    """Counter-based 64-bit PRNG (Philox) for reproducible noise streams."""
    return np.random.Generator(np.random.Philox(seed))


def laplace_sample(
    rng: np.random.Generator, scale: float, shape: tuple[int, ...]
) -> np.ndarray:
    """Inverse-CDF Laplace(0, scale) samples."""
    u = rng.random(shape) - 0.5
    t = np.maximum(1.0 - 2.0 * np.abs(u), np.finfo(np.float64).tiny)
    return -scale * np.sign(u) * np.log(t)


def stochastic_binarization(
    a_pre: np.ndarray,
    epsilon: float,
    sensitivity: float = 2.0,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Binarize with Laplace noise under the sign: sign(clip(a) - Lap(s/eps)).

    `noise` injects a fixed noise tensor for testing; otherwise `rng` draws it.
    """
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon}")
    if noise is None:
        if rng is None:
            raise ConfigError("stochastic_binarization needs an rng or injected noise")
        noise = laplace_sample(rng, sensitivity / epsilon, a_pre.shape)
    a = np.clip(a_pre, -1.0, 1.0)
    return np.where(a - noise >= 0, 1.0, -1.0).astype(np.float32)


def double_binarization(
    a_b: np.ndarray,
    epsilon: float,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Re-binarize noisy bits: sign(a_b + Lap(2/eps)); sign has sensitivity 2."""
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon}")
    if noise is None:
        if rng is None:
            raise ConfigError("double_binarization needs an rng or injected noise")
        noise = laplace_sample(rng, 2.0 / epsilon, a_b.shape)
    return np.where(a_b + noise >= 0, 1.0, -1.0).astype(np.float32)


def randomized_response(
    a_b: np.ndarray,
    p: float,
    rng: np.random.Generator | None = None,
    u: np.ndarray | None = None,
) -> np.ndarray:
    """Keep each bit with probability p, else emit +1 or -1 with equal odds.

    A single uniform draw partitions [0,1): [0,p) keeps, [p, p+(1-p)/2)
    emits +1, the rest emits -1.
    """
    if not 0 <= p < 1:
        raise ConfigError(f"keep probability must be in [0, 1), got {p}")
    if u is None:
        if rng is None:
            raise ConfigError("randomized_response needs an rng or injected uniforms")
        u = rng.random(a_b.shape)
    keep = u < p
    plus = u < p + (1.0 - p) / 2.0
    return np.where(keep, a_b, np.where(plus, 1.0, -1.0)).astype(np.float32)


@dataclass
class DpConfig:
    """Mechanism selection for the smashed-data channel."""

    kind: str = "none"
    epsilon: float = 2.0
    p: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        self.kind = normalize_mechanism(self.kind)

    def validate(self) -> None:
        if self.kind in ("sb", "db") and self.epsilon <= 0:
            raise ConfigError(f"dp kind {self.kind!r} needs epsilon > 0, got {self.epsilon}")
        if self.kind == "rr" and not 0 <= self.p < 1:
            raise ConfigError(f"dp kind 'rr' needs p in [0, 1), got {self.p}")


def apply_mechanism(
    cfg: DpConfig,
    a_pre: np.ndarray,
    a_b: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Return the {-1,+1} tensor to transmit for the configured mechanism."""
    if cfg.kind == "none":
        return a_b
    if cfg.kind == "sb":
        return stochastic_binarization(a_pre, cfg.epsilon, rng=rng)
    if cfg.kind == "db":
        return double_binarization(a_b, cfg.epsilon, rng=rng)
    if cfg.kind == "rr":
        return randomized_response(a_b, cfg.p, rng=rng)
    raise ConfigError(f"unknown dp mechanism {cfg.kind!r}")
