"""Minimal tensor ops for split training: conv, pool, dense, batch norm, losses.

All functions are plain-numpy and dtype-preserving, so the same code paths
run in float32 for training and float64 for finite-difference gradient
checks. Layout is NCHW for feature maps and (out, in, kh, kw) for kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Return a (N*Ho*Wo, C*kh*kw) view-copy of sliding windows of x."""
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, ho, wo, c, kh, kw),
        strides=(s0, s2 * stride, s3 * stride, s1, s2, s3),
    )
    return win.reshape(n * ho * wo, c * kh * kw)


def conv2d_forward(
    x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0
) -> np.ndarray:
    """Cross-correlate x (N,C,H,W) with kernels w (O,C,kh,kw); no bias term."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects rank-4 input and kernels, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"channel mismatch: input {x.shape} vs kernels {w.shape}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if h < kh or wd < kw:
        raise DimensionError(f"kernel {w.shape} larger than padded input {x.shape}")
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    cols = _im2col(x, kh, kw, stride)
    out = cols @ w.reshape(o, -1).T
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)


def conv2d_backward(
    x: np.ndarray,
    w: np.ndarray,
    grad_out: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Return (grad_x, grad_w) of conv2d_forward for upstream grad_out."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    g = grad_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    cols = _im2col(xp, kh, kw, stride)
    grad_w = (g.T @ cols).reshape(w.shape)
    grad_cols = (g @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    grad_xp = np.zeros_like(xp)
    for dy in range(kh):
        ys = slice(dy, dy + stride * ho, stride)
        for dx in range(kw):
            xs = slice(dx, dx + stride * wo, stride)
            grad_xp[:, :, ys, xs] += grad_cols[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
    if padding:
        grad_x = grad_xp[:, :, padding:-padding, padding:-padding]
    else:
        grad_x = grad_xp
    return grad_x, grad_w


def maxpool2x2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 stride-2 max pool; ties go to the first element in row-major window order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial extents, got {x.shape}")
    win = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = np.argmax(win, axis=-1)  # argmax returns the first maximum
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2x2_backward(idx: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Scatter grad_out back through the argmax indices of maxpool2x2_forward."""
    n, c, ho, wo = grad_out.shape
    gwin = np.zeros((n, c, ho, wo, 4), dtype=grad_out.dtype)
    np.put_along_axis(gwin, idx[..., None], grad_out[..., None], axis=-1)
    return (
        gwin.reshape(n, c, ho, wo, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho * 2, wo * 2)
    )


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(x, 0)."""
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of relu at pre-activation x."""
    return grad_out * (x > 0)


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map x (N,D) @ w (D,M) + b (M,)."""
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"dense mismatch: input {x.shape} vs weights {w.shape}")
    return x @ w + b


def dense_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (grad_x, grad_w, grad_b) for dense_forward."""
    return grad_out @ w.T, x.T @ grad_out, grad_out.sum(axis=0)


def dropout_forward(
    x: np.ndarray, rate: float, rng: np.random.Generator, training: bool
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout: zero with probability rate, scale kept values by 1/(1-rate).

    rate == 0 is an exact identity and consumes no randomness.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    mask = rng.random(x.shape) >= rate
    return x * mask / (1.0 - rate), mask


def dropout_backward(mask: np.ndarray | None, rate: float, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of dropout_forward given its kept-mask."""
    if mask is None:
        return grad_out
    return grad_out * mask / (1.0 - rate)


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


def batchnorm_forward(
    x: np.ndarray, state: BatchNormState, training: bool
) -> tuple[np.ndarray, dict | None]:
    """Normalize per channel; batch stats (biased variance) in training, running stats in eval.

    Training mode updates running stats in place:
    running <- (1 - momentum) * running + momentum * batch.
    Returns (y, cache); cache is None in eval mode.
    """
    if x.shape[0] == 0:
        raise DimensionError("batch norm needs a non-empty batch")
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)  # biased
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * var
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    y = state.gamma.reshape(shape) * x_hat + state.beta.reshape(shape)
    if not training:
        return y, None
    return y, {"x_hat": x_hat, "inv_std": inv_std, "shape": shape, "axes": axes}


def batchnorm_backward(
    cache: dict, state: BatchNormState, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (grad_x, grad_gamma, grad_beta) for a training-mode forward."""
    x_hat = cache["x_hat"]
    shape = cache["shape"]
    axes = cache["axes"]
    m = grad_out.size / x_hat.shape[1]  # elements per channel
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * x_hat).sum(axis=axes)
    scale = (state.gamma * cache["inv_std"]).reshape(shape)
    grad_x = scale * (
        grad_out
        - (grad_beta / m).reshape(shape)
        - x_hat * (grad_gamma / m).reshape(shape)
    )
    return grad_x, grad_gamma, grad_beta


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. logits."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (N, classes), got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise DimensionError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


@dataclass
class SgdConfig:
    """Hyperparameters for momentum SGD with decoupled-from-nothing weight decay."""

    lr: float = 1e-2
    momentum: float = 0.8
    weight_decay: float = 5e-4


@dataclass
class SgdParam:
    """A trainable array plus its velocity buffer and decay flag."""

    value: np.ndarray
    velocity: np.ndarray = field(init=False)
    decay: bool = True  # biases and batch-norm params opt out

    def __post_init__(self) -> None:
        self.velocity = np.zeros_like(self.value)


def sgd_step(param: SgdParam, grad: np.ndarray, cfg: SgdConfig) -> None:
    """In-place update: v <- momentum*v + grad + weight_decay*param; param <- param - lr*v."""
    g = grad
    if param.decay and cfg.weight_decay:
        g = grad + cfg.weight_decay * param.value
    param.velocity[...] = cfg.momentum * param.velocity + g
    param.value -= cfg.lr * param.velocity


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=np.float32) -> np.ndarray:
    """Uniform init in [-k, k] with k = sqrt(1/fan_in)."""
    k = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-k, k, size=shape).astype(dtype)
