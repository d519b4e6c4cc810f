"""IDX dataset IO and a deterministic synthetic digit corpus.

The loader reads the classic big-endian IDX format (magic 0x00000803 for
image files, 0x00000801 for label files). When no real corpus is on disk,
`ensure_dataset` renders one: vector-font digits distorted by random
affine and elastic warps, written back through the same IDX files so the
loader path is always exercised.
"""

from __future__ import annotations

import struct
from pathlib import Path

import cv2
import numpy as np

from .errors import DataError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"

_FONTS = (
    cv2.FONT_HERSHEY_SIMPLEX,
    cv2.FONT_HERSHEY_DUPLEX,
    cv2.FONT_HERSHEY_COMPLEX,
    cv2.FONT_HERSHEY_TRIPLEX,
)


def load_idx_images(path: str | Path) -> np.ndarray:
    """Read an IDX image file to (N, H, W) uint8."""
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise DataError(f"{path}: truncated IDX header ({len(buf)} bytes)")
    magic, n, h, w = struct.unpack_from(">IIII", buf, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise DataError(f"{path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    if len(buf) != 16 + n * h * w:
        raise DataError(f"{path}: expected {16 + n * h * w} bytes for {n}x{h}x{w}, got {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(n, h, w).copy()


def load_idx_labels(path: str | Path) -> np.ndarray:
    """Read an IDX label file to (N,) uint8."""
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise DataError(f"{path}: truncated IDX header ({len(buf)} bytes)")
    magic, n = struct.unpack_from(">II", buf, 0)
    if magic != IDX_LABELS_MAGIC:
        raise DataError(f"{path}: magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(buf) != 8 + n:
        raise DataError(f"{path}: expected {8 + n} bytes for {n} labels, got {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, offset=8).copy()


def save_idx_images(path: str | Path, images: np.ndarray) -> None:
    images = np.ascontiguousarray(images, dtype=np.uint8)
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(images.tobytes())


def save_idx_labels(path: str | Path, labels: np.ndarray) -> None:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def render_digit(rng: np.random.Generator, label: int, size: int = 28) -> np.ndarray:
    """Render one distorted digit glyph, white on black, uint8."""
    big = size * 2  # draw supersampled, warp, then area-downsample
    canvas = np.zeros((big, big), dtype=np.uint8)
    font = _FONTS[rng.integers(len(_FONTS))]
    scale = 1.6 + 0.3 * rng.random()
    thickness = int(rng.integers(3, 7))
    text = str(label)
    (tw, th), _ = cv2.getTextSize(text, font, scale, thickness)
    org = ((big - tw) // 2, (big + th) // 2)
    cv2.putText(canvas, text, org, font, scale, 255, thickness, cv2.LINE_AA)

    angle = float(rng.uniform(-9, 9))
    zoom = float(rng.uniform(0.9, 1.12))
    shear = float(rng.uniform(-0.08, 0.08))
    c = big / 2
    rot = cv2.getRotationMatrix2D((c, c), angle, zoom)
    rot[0, 1] += shear
    canvas = cv2.warpAffine(canvas, rot, (big, big), flags=cv2.INTER_LINEAR)

    # elastic wobble: coarse displacement field, upsampled and applied
    coarse = rng.uniform(-1, 1, size=(2, 4, 4)).astype(np.float32) * 2.5
    dx = cv2.resize(coarse[0], (big, big), interpolation=cv2.INTER_CUBIC)
    dy = cv2.resize(coarse[1], (big, big), interpolation=cv2.INTER_CUBIC)
    grid_x, grid_y = np.meshgrid(
        np.arange(big, dtype=np.float32), np.arange(big, dtype=np.float32)
    )
    canvas = cv2.remap(
        canvas, grid_x + dx, grid_y + dy, cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT
    )

    # recentre on the ink centroid, then add a small positional jitter
    ys, xs = np.nonzero(canvas)
    jx, jy = rng.uniform(-2, 2, size=2)
    if ys.size:
        wts = canvas[ys, xs].astype(np.float64)
        cx = float((xs * wts).sum() / wts.sum())
        cy = float((ys * wts).sum() / wts.sum())
        shift = np.float64([[1, 0, c - cx + jx], [0, 1, c - cy + jy]])
        canvas = cv2.warpAffine(canvas, shift, (big, big), flags=cv2.INTER_LINEAR)

    img = cv2.resize(canvas, (size, size), interpolation=cv2.INTER_AREA)
    blur = float(rng.uniform(0.0, 0.6))
    if blur > 0.35:
        img = cv2.GaussianBlur(img, (3, 3), blur)
    gain = float(rng.uniform(0.85, 1.0))
    return np.clip(img.astype(np.float32) * gain, 0, 255).astype(np.uint8)


def generate_corpus(n: int, seed: int, size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """Render n digits with balanced labels; deterministic in (n, seed)."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.uint8) % 10
    rng.shuffle(labels)
    images = np.stack([render_digit(rng, int(lb), size) for lb in labels])
    return images, labels


def ensure_dataset(
    data_dir: str | Path, n_train: int = 12000, n_test: int = 2000, seed: int = 1234
) -> Path:
    """Create the synthetic IDX corpus under data_dir unless files already exist."""
    d = Path(data_dir)
    d.mkdir(parents=True, exist_ok=True)
    paths = [d / TRAIN_IMAGES, d / TRAIN_LABELS, d / TEST_IMAGES, d / TEST_LABELS]
    if all(p.exists() for p in paths):
        return d
    xi, yi = generate_corpus(n_train, seed)
    save_idx_images(paths[0], xi)
    save_idx_labels(paths[1], yi)
    xt, yt = generate_corpus(n_test, seed + 1)
    save_idx_images(paths[2], xt)
    save_idx_labels(paths[3], yt)
    return d


def load_dataset(data_dir: str | Path) -> dict:
    """Load train/test IDX files as float32 [0,1] NCHW arrays plus labels."""
    d = Path(data_dir)
    for name in (TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS):
        if not (d / name).exists():
            raise DataError(f"missing dataset file {d / name}")
    x_train = load_idx_images(d / TRAIN_IMAGES)
    y_train = load_idx_labels(d / TRAIN_LABELS)
    x_test = load_idx_images(d / TEST_IMAGES)
    y_test = load_idx_labels(d / TEST_LABELS)
    for x, y, what in ((x_train, y_train, "train"), (x_test, y_test, "test")):
        if x.shape[0] != y.shape[0]:
            raise DataError(f"{what}: {x.shape[0]} images but {y.shape[0]} labels")
        if y.size and y.max() > 9:
            raise DataError(f"{what}: label {int(y.max())} out of range 0..9")
    def as_nchw(x: np.ndarray) -> np.ndarray:
        return (x.astype(np.float32) / 255.0)[:, None, :, :]

    return {
        "x_train": as_nchw(x_train),
        "y_train": y_train,
        "x_test": as_nchw(x_test),
        "y_test": y_test,
        "info": {
            "dir": str(d),
            "train": int(x_train.shape[0]),
            "test": int(x_test.shape[0]),
            "image": list(x_train.shape[1:]),
        },
    }
