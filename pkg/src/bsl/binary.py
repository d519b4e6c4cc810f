"""Binarization primitives: sign/STE, packed bit tensors, XNOR-popcount convolution.

A PackedBitTensor stores {-1,+1} values one bit per element (1 encodes +1),
rows padded to 64-bit word boundaries with zero bits. The wire encoding is
rank and extents as little-endian uint32 followed by the words, each
little-endian. Rows are slices of the leading axis, so kernels pack one row
per kernel and activations one row per sample.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from functools import reduce

import numpy as np

from .errors import ConfigError, DataError, DecodeError, DimensionError

try:  # the numpy reference path serves when numba is unavailable
    from . import _binkernels
except ImportError:  # pragma: no cover - exercised only on hosts without numba
    _binkernels = None

WORD_BITS = 64


def fast_path_available() -> bool:
    """True when the jitted kernels can be used (numba importable, not disabled)."""
    return _binkernels is not None and not os.environ.get("BSL_NO_FAST")


def sign(x: np.ndarray) -> np.ndarray:
    """Deterministic binarization: +1 where x >= 0, else -1; dtype is preserved."""
    return np.where(x >= 0, 1, -1).astype(x.dtype)


def ste_backward(pre: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Straight-through estimator: pass grad where |pre| <= 1, zero elsewhere."""
    return grad_out * (np.abs(pre) <= 1)


def clip_weights(w: np.ndarray) -> np.ndarray:
    """Clamp latent real weights to [-1, 1] after each update."""
    return np.clip(w, -1.0, 1.0)


def _row_split(dims: tuple[int, ...]) -> tuple[int, int]:
    """Return (rows, bits per row) for a logical shape."""
    if len(dims) == 0:
        raise DimensionError("cannot pack a zero-rank tensor")
    if len(dims) == 1:
        return 1, dims[0]
    return dims[0], reduce(lambda a, b: a * b, dims[1:], 1)


@dataclass
class PackedBitTensor:
    """Bit-packed {-1,+1} tensor; see module docstring for the layout."""

    dims: tuple[int, ...]
    words: np.ndarray  # (rows, words_per_row) uint64

    @property
    def rows(self) -> int:
        return _row_split(self.dims)[0]

    @property
    def row_bits(self) -> int:
        return _row_split(self.dims)[1]

    @property
    def wire_nbytes(self) -> int:
        """Serialized size: 4-byte rank, 4 bytes per extent, 8 bytes per word."""
        return 4 + 4 * len(self.dims) + self.words.size * 8

    def to_bytes(self) -> bytes:
        head = struct.pack("<I", len(self.dims)) + struct.pack(
            f"<{len(self.dims)}I", *self.dims
        )
        return head + self.words.astype("<u8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "PackedBitTensor":
        if len(buf) < 4:
            raise DecodeError("packed tensor truncated before rank")
        (rank,) = struct.unpack_from("<I", buf, 0)
        if rank == 0 or rank > 8:
            raise DecodeError(f"packed tensor rank {rank} out of range")
        if len(buf) < 4 + 4 * rank:
            raise DecodeError("packed tensor truncated in extents")
        dims = struct.unpack_from(f"<{rank}I", buf, 4)
        if any(d == 0 for d in dims):
            raise DecodeError(f"packed tensor has zero extent: {dims}")
        rows, row_bits = _row_split(dims)
        wpr = (row_bits + WORD_BITS - 1) // WORD_BITS
        body = buf[4 + 4 * rank :]
        if len(body) != rows * wpr * 8:
            raise DecodeError(
                f"packed tensor for dims {dims} needs {rows * wpr * 8} word bytes, got {len(body)}"
            )
        words = np.frombuffer(body, dtype="<u8").reshape(rows, wpr).astype(np.uint64)
        pad = row_bits % WORD_BITS
        if pad and np.any(words[:, -1] >> np.uint64(pad)):
            raise DecodeError("packed tensor has nonzero padding bits")
        return cls(dims=tuple(int(d) for d in dims), words=words)


def pack_bits(a: np.ndarray) -> PackedBitTensor:
    """Pack a {-1,+1} array; raises if any value is neither -1 nor +1."""
    bad = (a != 1) & (a != -1)
    if bad.any():
        i = int(np.argmax(bad.ravel()))
        raise DataError(f"value {a.ravel()[i]!r} at flat index {i} is not -1 or +1")
    rows, row_bits = _row_split(a.shape)
    bits = (a.reshape(rows, row_bits) > 0).astype(np.uint8)
    wpr = (row_bits + WORD_BITS - 1) // WORD_BITS
    padded = np.zeros((rows, wpr * WORD_BITS), dtype=np.uint8)
    padded[:, :row_bits] = bits
    words = (
        np.packbits(padded, axis=1, bitorder="little")
        .view("<u8")
        .astype(np.uint64)
        .reshape(rows, wpr)
    )
    return PackedBitTensor(dims=tuple(a.shape), words=words)


def unpack_bits(p: PackedBitTensor) -> np.ndarray:
    """Expand back to a float32 {-1,+1} array of the original shape."""
    rows, row_bits = _row_split(p.dims)
    as_bytes = p.words.astype("<u8").reshape(rows, -1).view(np.uint8)
    bits = np.unpackbits(as_bytes, axis=1, bitorder="little")[:, :row_bits]
    return (bits.astype(np.float32) * 2.0 - 1.0).reshape(p.dims)


def xnor_popcount_dot(a_words: np.ndarray, b_words: np.ndarray, n_bits: int) -> int:
    """Dot product of two packed {-1,+1} rows: n - 2 * popcount(a XOR b).

    Padding bits must be zero in both rows (pack_bits guarantees this), so
    they never count as mismatches.
    """
    if a_words.shape != b_words.shape:
        raise DimensionError(f"row shapes differ: {a_words.shape} vs {b_words.shape}")
    mism = int(np.bitwise_count(a_words ^ b_words).sum())
    return n_bits - 2 * mism


@dataclass(frozen=True)
class BinaryConvPlan:
    """Precomputed layout for one binarized conv layer.

    Activations are packed channel-last (N,H,W,C) so each conv window is
    k*k contiguous c-bit chunks; kernels are repacked once to the same bit
    order. Kernels short enough to fit a word more than once are replicated
    `replication` times so one XNOR evaluates that many adjacent windows.
    """

    batch: int
    in_channels: int
    height: int
    width: int
    out_channels: int
    kernel: int
    stride: int
    window_bits: int
    words_per_window: int
    replication: int
    out_height: int
    out_width: int

    @classmethod
    def build(
        cls,
        batch: int,
        in_channels: int,
        height: int,
        width: int,
        out_channels: int,
        kernel: int,
        stride: int = 1,
        padding: int = 0,
    ) -> "BinaryConvPlan":
        if padding != 0:
            raise ConfigError(
                "binarized convs support valid padding only; zero-padding has no "
                "{-1,+1} representation"
            )
        if height < kernel or width < kernel:
            raise DimensionError(
                f"kernel {kernel} larger than input {height}x{width}"
            )
        if stride < 1:
            raise ConfigError(f"stride must be >= 1, got {stride}")
        m = kernel * kernel * in_channels
        rep = WORD_BITS // m if m <= WORD_BITS // 2 else 1
        wpw = 1 if rep > 1 else (m + WORD_BITS - 1) // WORD_BITS
        return cls(
            batch=batch,
            in_channels=in_channels,
            height=height,
            width=width,
            out_channels=out_channels,
            kernel=kernel,
            stride=stride,
            window_bits=m,
            words_per_window=wpw,
            replication=rep,
            out_height=(height - kernel) // stride + 1,
            out_width=(width - kernel) // stride + 1,
        )

    @property
    def input_dims(self) -> tuple[int, int, int, int]:
        return (self.batch, self.height, self.width, self.in_channels)

    @property
    def kernel_dims(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.kernel, self.kernel, self.in_channels)

    def pack_input(self, x: np.ndarray) -> PackedBitTensor:
        """Pack a dense {-1,+1} activation (N,C,H,W) into the plan's layout."""
        if x.shape != (self.batch, self.in_channels, self.height, self.width):
            raise DimensionError(
                f"input {x.shape} does not match plan "
                f"{(self.batch, self.in_channels, self.height, self.width)}"
            )
        return pack_bits(np.ascontiguousarray(x.transpose(0, 2, 3, 1)))

    def pack_kernels(self, w: np.ndarray) -> PackedBitTensor:
        """Pack dense {-1,+1} kernels (O,C,kh,kw) into the plan's bit order."""
        if w.shape != (self.out_channels, self.in_channels, self.kernel, self.kernel):
            raise DimensionError(
                f"kernels {w.shape} do not match plan "
                f"{(self.out_channels, self.in_channels, self.kernel, self.kernel)}"
            )
        return pack_bits(np.ascontiguousarray(w.transpose(0, 2, 3, 1)))

    def replicated_kernel_words(self, weights: PackedBitTensor) -> np.ndarray:
        """Kernel word with `replication` copies at stride window_bits."""
        base = weights.words[:, 0]
        out = np.zeros(self.out_channels, dtype=np.uint64)
        for r in range(self.replication):
            out |= base << np.uint64(r * self.window_bits)
        return out


def _check_operands(
    inp: PackedBitTensor, weights: PackedBitTensor, plan: BinaryConvPlan
) -> None:
    if inp.dims != plan.input_dims:
        raise DimensionError(f"input dims {inp.dims} do not match plan {plan.input_dims}")
    if weights.dims != plan.kernel_dims:
        raise DimensionError(
            f"kernel dims {weights.dims} do not match plan {plan.kernel_dims}"
        )


def _binary_conv2d_fast(
    inp: PackedBitTensor, weights: PackedBitTensor, plan: BinaryConvPlan
) -> np.ndarray:
    p = plan.batch * plan.out_height * plan.out_width
    out = np.empty((p, plan.out_channels), dtype=np.int32)
    if plan.replication > 1:
        n_words = (p + plan.replication - 1) // plan.replication
        win = np.zeros(n_words, dtype=np.uint64)
        _binkernels.pack_windows(
            inp.words, plan.batch, plan.in_channels, plan.height, plan.width,
            plan.kernel, plan.stride, plan.replication, plan.window_bits, 1, win,
        )
        _binkernels.xnor_gemm_replicated(
            win, plan.replicated_kernel_words(weights),
            plan.window_bits, plan.replication, out,
        )
    else:
        win = np.zeros(p * plan.words_per_window, dtype=np.uint64)
        _binkernels.pack_windows(
            inp.words, plan.batch, plan.in_channels, plan.height, plan.width,
            plan.kernel, plan.stride, 1, plan.window_bits, plan.words_per_window, win,
        )
        _binkernels.xnor_gemm(
            win.reshape(p, plan.words_per_window), weights.words,
            plan.window_bits, out,
        )
    return (
        out.reshape(plan.batch, plan.out_height, plan.out_width, plan.out_channels)
        .transpose(0, 3, 1, 2)
    )


def _binary_conv2d_reference(
    inp: PackedBitTensor, weights: PackedBitTensor, plan: BinaryConvPlan
) -> np.ndarray:
    """Per-window XNOR popcount in plain numpy; bit-identical to the fast path."""
    bits = (unpack_bits(inp) > 0).astype(np.uint8)  # (N,H,W,C)
    s0, s1, s2, s3 = bits.strides
    k, st = plan.kernel, plan.stride
    win = np.lib.stride_tricks.as_strided(
        bits,
        shape=(plan.batch, plan.out_height, plan.out_width, k, k, plan.in_channels),
        strides=(s0, s1 * st, s2 * st, s1, s2, s3),
    ).reshape(-1, plan.window_bits)
    p, m = win.shape
    wpw = (m + WORD_BITS - 1) // WORD_BITS
    padded = np.zeros((p, wpw * WORD_BITS), dtype=np.uint8)
    padded[:, :m] = win
    win_words = (
        np.packbits(padded, axis=1, bitorder="little").view("<u8").astype(np.uint64)
    ).reshape(p, wpw)
    mism = np.bitwise_count(win_words[:, None, :] ^ weights.words[None, :, :]).sum(
        axis=2, dtype=np.int64
    )
    out = (m - 2 * mism).astype(np.int32)
    return (
        out.reshape(plan.batch, plan.out_height, plan.out_width, plan.out_channels)
        .transpose(0, 3, 1, 2)
    )


def binary_conv2d(
    inp: PackedBitTensor,
    weights: PackedBitTensor,
    plan: BinaryConvPlan,
    fast: bool | None = None,
) -> np.ndarray:
    """XNOR-popcount convolution of packed {-1,+1} operands.

    Returns int32 (N, O, Ho, Wo), exactly equal to conv2d_forward on the
    unpacked operands. `fast=None` picks the jitted path when available.
    """
    _check_operands(inp, weights, plan)
    if fast is None:
        fast = fast_path_available()
    elif fast and not fast_path_available():
        raise ConfigError("fast path requested but jitted kernels are unavailable")
    if fast:
        return _binary_conv2d_fast(inp, weights, plan)
    return _binary_conv2d_reference(inp, weights, plan)


def count_duplicate_kernels(weights: PackedBitTensor) -> dict[str, int]:
    """Count kernels sharing an identical sign pattern (packed-row equality)."""
    total = weights.rows
    distinct = int(np.unique(weights.words, axis=0).shape[0])
    return {"total": total, "distinct": distinct, "duplicates": total - distinct}


def packed_size_ratio(n_elements: int, dims: tuple[int, ...]) -> float:
    """float32 bytes over packed wire bytes for a tensor of the given shape."""
    rows, row_bits = _row_split(dims)
    wpr = (row_bits + WORD_BITS - 1) // WORD_BITS
    packed = 4 + 4 * len(dims) + rows * wpr * 8
    return (n_elements * 4) / packed


def warm_fast_path() -> bool:
    """Compile the jitted kernels on tiny inputs; returns availability."""
    if not fast_path_available():
        return False
    for c, k in ((1, 2), (8, 3)):  # covers replicated and multi-word branches
        plan = BinaryConvPlan.build(1, c, 6, 6, 2, k)
        rng = np.random.default_rng(0)
        x = sign(rng.standard_normal((1, c, 6, 6)).astype(np.float32))
        w = sign(rng.standard_normal((2, c, k, k)).astype(np.float32))
        binary_conv2d(plan.pack_input(x), plan.pack_kernels(w), plan, fast=True)
    return True
