"""Input-leakage metrics for smashed data, plus differentiable losses.

Metrics compare raw inputs against split-layer activation maps: KL
divergence of intensity histograms, windowed SSIM, distance correlation,
and MSE/PSNR. SSIM and distance correlation also come in loss form with
analytic gradients so a client can train against them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW = 8
KL_BINS = 64
KL_SMOOTHING = 1e-6


def normalize01(a: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant array maps to all zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo = a.min()
    rng = a.max() - lo
    if rng == 0:
        return np.zeros_like(a)
    return (a - lo) / rng


def kl_divergence(raw: np.ndarray, recon: np.ndarray, bins: int = KL_BINS) -> float:
    """KL(hist(raw) || hist(recon)) over [0,1] intensity histograms.

    Both images are min-max normalized first; bin counts get additive
    smoothing before normalization so the value is always finite. Higher
    means the reconstruction's intensity profile diverges more from the raw
    input (less leakage through this lens).
    """
    if raw.size == 0 or recon.size == 0:
        raise DataError("kl_divergence needs non-empty inputs")
    p, _ = np.histogram(normalize01(raw), bins=bins, range=(0.0, 1.0))
    q, _ = np.histogram(normalize01(recon), bins=bins, range=(0.0, 1.0))
    p = p + KL_SMOOTHING
    q = q + KL_SMOOTHING
    p = p / p.sum()
    q = q / q.sum()
    return float(np.sum(p * np.log(p / q)))


def _ssim_windows(a: np.ndarray) -> np.ndarray:
    """Tile into non-overlapping 8x8 windows; whole image if smaller."""
    h, w = a.shape
    ws = SSIM_WINDOW
    if h < ws or w < ws:
        return a.reshape(1, -1)
    hw, ww = h // ws, w // ws
    return (
        a[: hw * ws, : ww * ws]
        .reshape(hw, ws, ww, ws)
        .transpose(0, 2, 1, 3)
        .reshape(hw * ww, ws * ws)
    )


def _ssim_value_grad(
    a: np.ndarray, b: np.ndarray, need_grad: bool
) -> tuple[float, np.ndarray | None]:
    if a.shape != b.shape:
        raise DimensionError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise DimensionError(f"ssim expects 2-D images, got {a.shape}")
    aw = _ssim_windows(np.asarray(a, dtype=np.float64))
    bw = _ssim_windows(np.asarray(b, dtype=np.float64))
    nw, n = aw.shape
    mx = aw.mean(axis=1, keepdims=True)
    my = bw.mean(axis=1, keepdims=True)
    vx = (aw * aw).mean(axis=1, keepdims=True) - mx * mx
    vy = (bw * bw).mean(axis=1, keepdims=True) - my * my
    cxy = (aw * bw).mean(axis=1, keepdims=True) - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * cxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = vx + vy + SSIM_C2
    s = a1 * a2 / (b1 * b2)
    value = float(s.mean())
    if not need_grad:
        return value, None
    da1 = 2 * my / n
    da2 = 2 * (bw - my) / n
    db1 = 2 * mx / n
    db2 = 2 * (aw - mx) / n
    ds = (da1 * a2 + a1 * da2) / (b1 * b2) - s * (db1 / b1 + db2 / b2)
    ds /= nw
    h, w = a.shape
    ws = SSIM_WINDOW
    grad = np.zeros((h, w), dtype=np.float64)
    if h < ws or w < ws:
        grad[...] = ds.reshape(h, w)
    else:
        hw, ww = h // ws, w // ws
        grad[: hw * ws, : ww * ws] = (
            ds.reshape(hw, ww, ws, ws).transpose(0, 2, 1, 3).reshape(hw * ws, ww * ws)
        )
    return value, grad


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over non-overlapping 8x8 windows of [0,1] images."""
    value, _ = _ssim_value_grad(a, b, need_grad=False)
    return value


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of a 2-D image with center-aligned sampling."""
    h, w = img.shape
    img = np.asarray(img, dtype=np.float64)
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    return top * (1 - fy[:, 0])[:, None] + bot * fy[:, 0][:, None]


def _gray_targets(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Per-image grayscale [0,1] targets resized to the activation grid."""
    if x.ndim != 4:
        raise DimensionError(f"raw batch must be (N,C,H,W), got {x.shape}")
    gray = x.mean(axis=1)
    return np.stack(
        [resize_bilinear(normalize01(g), out_h, out_w) for g in gray], axis=0
    )


def ssim_loss_grad(a_pre: np.ndarray, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean-SSIM leak loss between activation maps and the raw input.

    `a_pre` is the pre-binarization activation (N,C,h,w); maps enter SSIM
    through the fixed affine (v+1)/2 so the loss stays differentiable where
    min-max scaling would not be. Returns (loss, d loss / d a_pre).
    """
    if a_pre.ndim != 4:
        raise DimensionError(f"activation batch must be (N,C,h,w), got {a_pre.shape}")
    n, c, h, w = a_pre.shape
    targets = _gray_targets(x, h, w)
    total = 0.0
    grad = np.zeros(a_pre.shape, dtype=np.float64)
    for i in range(n):
        for ch in range(c):
            v, g = _ssim_value_grad((a_pre[i, ch] + 1.0) / 2.0, targets[i], True)
            total += v
            grad[i, ch] = g * 0.5
    count = n * c
    return total / count, grad / count


def _double_center(d: np.ndarray) -> np.ndarray:
    rm = d.mean(axis=1, keepdims=True)
    cm = d.mean(axis=0, keepdims=True)
    return d - rm - cm + d.mean()


def _pairwise_dist(rows: np.ndarray) -> np.ndarray:
    sq = (rows * rows).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (rows @ rows.T)
    # the diagonal is zero by definition; the expansion leaves roundoff
    # residue there that sqrt would amplify
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(np.maximum(d2, 0.0))


def dcor(x_rows: np.ndarray, y_rows: np.ndarray) -> float:
    """Sample distance correlation between two row-aligned batches, in [0, 1]."""
    value, _ = _dcor_value_grad(x_rows, y_rows, need_grad=False)
    return value


def _dcor_value_grad(
    x_rows: np.ndarray, y_rows: np.ndarray, need_grad: bool
) -> tuple[float, np.ndarray | None]:
    if x_rows.shape[0] != y_rows.shape[0]:
        raise DimensionError(
            f"row counts differ: {x_rows.shape} vs {y_rows.shape}"
        )
    n = x_rows.shape[0]
    if n < 2:
        raise DataError(f"distance correlation needs >= 2 rows, got {n}")
    x_rows = np.asarray(x_rows, dtype=np.float64)
    y_rows = np.asarray(y_rows, dtype=np.float64)
    b_raw = _pairwise_dist(y_rows)
    a = _double_center(_pairwise_dist(x_rows))
    b = _double_center(b_raw)
    n2 = n * n
    dcov2 = float((a * b).sum()) / n2
    vx2 = float((a * a).sum()) / n2
    vy2 = float((b * b).sum()) / n2
    if vx2 <= 0 or vy2 <= 0:
        return 0.0, np.zeros_like(y_rows) if need_grad else None
    d = math.sqrt(vx2 * vy2)
    r2 = dcov2 / d
    r = math.sqrt(max(r2, 0.0))
    if not need_grad:
        return r, None
    if r == 0.0:
        return 0.0, np.zeros_like(y_rows)
    # dR/d b_jk via the chain C -> R; double centering is self-adjoint and
    # a, b are already centered, so dC/db = A/n^2 and dVy2/db = 2B/n^2.
    g = (a / (n2 * d) - (dcov2 * vx2 / (n2 * d**3)) * b) / (2.0 * r)
    with np.errstate(divide="ignore", invalid="ignore"):
        wmat = np.where(b_raw > 0, 2.0 * g / b_raw, 0.0)
    grad = y_rows * wmat.sum(axis=1)[:, None] - wmat @ y_rows
    return r, grad


def dcor_loss_grad(a_pre: np.ndarray, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Distance-correlation leak loss between activations and raw inputs.

    Rows are flattened per sample. Returns (loss, d loss / d a_pre).
    """
    n = a_pre.shape[0]
    value, grad = _dcor_value_grad(
        x.reshape(n, -1), a_pre.reshape(n, -1), need_grad=True
    )
    return value, grad.reshape(a_pre.shape)


def mse_psnr(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """MSE and PSNR (peak 1.0) between same-shaped [0,1] images; PSNR is inf iff MSE is 0."""
    if a.shape != b.shape:
        raise DimensionError(f"mse shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return 0.0, float("inf")
    return mse, 10.0 * math.log10(1.0 / mse)


def export_pgm(path: str | Path, img: np.ndarray) -> None:
    """Write a 2-D map as a binary PGM; constant maps become mid-gray."""
    if img.ndim != 2:
        raise DimensionError(f"pgm export expects a 2-D map, got {img.shape}")
    lo, hi = float(img.min()), float(img.max())
    if hi == lo:
        data = np.full(img.shape, 128, dtype=np.uint8)
    else:
        data = np.round((img - lo) / (hi - lo) * 255.0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


@dataclass
class LeakageReport:
    """Aggregate and per-channel raw-vs-activation leakage metrics."""

    kl_d: float
    ssim: float
    dcor: float
    mse: float
    psnr: float
    channels: list[dict] = field(default_factory=list)
    num_images: int = 0

    def to_dict(self) -> dict:
        return {
            "kl_d": self.kl_d,
            "ssim": self.ssim,
            "dcor": self.dcor,
            "mse": self.mse,
            "psnr": self.psnr,
            "num_images": self.num_images,
            "channels": self.channels,
        }


def compute_leakage_report(raw: np.ndarray, act: np.ndarray) -> LeakageReport:
    """Score activation maps (N,C,h,w) against raw inputs (N,C0,H,W).

    Per (image, channel): KL-D on native-resolution histograms, SSIM and MSE
    against the resized grayscale input. Distance correlation is computed
    per channel across the batch. Channel PSNR derives from channel mean
    MSE and the aggregate PSNR from the aggregate MSE, preserving
    mse=0 iff psnr=inf.
    """
    if raw.shape[0] != act.shape[0]:
        raise DimensionError(f"batch mismatch: raw {raw.shape} vs act {act.shape}")
    n, c, h, w = act.shape
    targets = _gray_targets(raw, h, w)
    gray_native = raw.mean(axis=1)
    x_flat = raw.reshape(n, -1)
    channels = []
    for ch in range(c):
        kls, ssims, mses = [], [], []
        for i in range(n):
            m = normalize01(act[i, ch])
            kls.append(kl_divergence(gray_native[i], act[i, ch]))
            ssims.append(ssim(m, targets[i]))
            mses.append(mse_psnr(m, targets[i])[0])
        ch_mse = float(np.mean(mses))
        channels.append(
            {
                "channel": ch,
                "kl_d": float(np.mean(kls)),
                "ssim": float(np.mean(ssims)),
                "dcor": dcor(x_flat, act[:, ch].reshape(n, -1)) if n >= 2 else 0.0,
                "mse": ch_mse,
                "psnr": float("inf") if ch_mse == 0 else 10.0 * math.log10(1.0 / ch_mse),
            }
        )
    agg_mse = float(np.mean([r["mse"] for r in channels]))
    return LeakageReport(
        kl_d=float(np.mean([r["kl_d"] for r in channels])),
        ssim=float(np.mean([r["ssim"] for r in channels])),
        dcor=float(np.mean([r["dcor"] for r in channels])),
        mse=agg_mse,
        psnr=float("inf") if agg_mse == 0 else 10.0 * math.log10(1.0 / agg_mse),
        channels=channels,
        num_images=n,
    )


def export_feature_maps(out_dir: str | Path, raw_image: np.ndarray, act_maps: np.ndarray) -> list[Path]:
    """Write raw.pgm plus one channel_NN.pgm per activation channel."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    raw_path = out / "raw.pgm"
    export_pgm(raw_path, raw_image if raw_image.ndim == 2 else raw_image.mean(axis=0))
    paths.append(raw_path)
    for ch in range(act_maps.shape[0]):
        p = out / f"channel_{ch:02d}.pgm"
        export_pgm(p, act_maps[ch])
        paths.append(p)
    return paths
