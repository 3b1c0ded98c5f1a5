"""IDX dataset files, normalization, and training-time augmentation."""

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


def _open_maybe_gz(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, n, offset, what):
    data = f.read(n)
    if len(data) != n:
        raise FormatError(
            f"truncated IDX file at byte {offset}: wanted {n} bytes of {what}, got {len(data)}"
        )
    return data


def read_idx_images(path):
    """(N, H, W) uint8 pixels from an IDX3 file (optionally gzipped)."""
    with _open_maybe_gz(path) as f:
        magic = struct.unpack(">i", _read_exact(f, 4, 0, "magic"))[0]
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(
                f"bad image magic 0x{magic:08x} at byte 0 (expected 0x{IDX_IMAGES_MAGIC:08x})"
            )
        n, h, w = struct.unpack(">iii", _read_exact(f, 12, 4, "dims"))
        if min(n, h, w) <= 0:
            raise FormatError(f"bad image dims ({n},{h},{w}) at byte 4")
        raw = _read_exact(f, n * h * w, 16, "pixels")
    return np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w)


def read_idx_labels(path):
    """(N,) uint8 labels from an IDX1 file (optionally gzipped)."""
    with _open_maybe_gz(path) as f:
        magic = struct.unpack(">i", _read_exact(f, 4, 0, "magic"))[0]
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(
                f"bad label magic 0x{magic:08x} at byte 0 (expected 0x{IDX_LABELS_MAGIC:08x})"
            )
        n = struct.unpack(">i", _read_exact(f, 4, 4, "count"))[0]
        if n <= 0:
            raise FormatError(f"bad label count {n} at byte 4")
        raw = _read_exact(f, n, 8, "labels")
    return np.frombuffer(raw, dtype=np.uint8).copy()


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, n, h, w))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, H, W) float32, mean-subtracted
    labels: np.ndarray  # (N,) int64

    def __len__(self):
        return self.images.shape[0]


@dataclass
class DataBundle:
    train: Dataset
    test: Dataset
    mean: float  # training-set pixel mean subtracted from both splits


def _find(data_dir, stem):
    for name in (stem, stem + ".gz"):
        path = os.path.join(data_dir, name)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"{stem}[.gz] not found in {data_dir}")


def mnist_load(data_dir):
    """Load the four standard IDX files, scale to [0,1], subtract the
    training-set mean from both splits."""
    train_x = read_idx_images(_find(data_dir, TRAIN_IMAGES))
    train_y = read_idx_labels(_find(data_dir, TRAIN_LABELS))
    test_x = read_idx_images(_find(data_dir, TEST_IMAGES))
    test_y = read_idx_labels(_find(data_dir, TEST_LABELS))
    if train_x.shape[0] != train_y.shape[0]:
        raise FormatError(
            f"train images ({train_x.shape[0]}) and labels ({train_y.shape[0]}) disagree"
        )
    if test_x.shape[0] != test_y.shape[0]:
        raise FormatError(
            f"test images ({test_x.shape[0]}) and labels ({test_y.shape[0]}) disagree"
        )
    tr = train_x.astype(np.float32) / 255.0
    te = test_x.astype(np.float32) / 255.0
    mean = float(tr.mean())
    return DataBundle(
        train=Dataset((tr - mean)[:, None], train_y.astype(np.int64)),
        test=Dataset((te - mean)[:, None], test_y.astype(np.int64)),
        mean=mean,
    )


# ---------------------------------------------------------------------------
# Large-input augmentation (behind the dataset interface; shape-level use)
# ---------------------------------------------------------------------------


def resize_shorter_side(image, target):
    """Bilinear resize of a (C,H,W) image so its shorter side equals target."""
    c, h, w = image.shape
    if h <= w:
        nh, nw = target, max(1, round(w * target / h))
    else:
        nh, nw = max(1, round(h * target / w)), target
    ys = np.linspace(0, h - 1, nh, dtype=np.float64)
    xs = np.linspace(0, w - 1, nw, dtype=np.float64)
    y0 = np.clip(ys.astype(np.int64), 0, h - 2)
    x0 = np.clip(xs.astype(np.int64), 0, w - 2)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    a = image[:, y0][:, :, x0]
    b = image[:, y0][:, :, x0 + 1]
    cc = image[:, y0 + 1][:, :, x0]
    d = image[:, y0 + 1][:, :, x0 + 1]
    out = a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx + cc * wy * (1 - wx) + d * wy * wx
    return out.astype(np.float32)


def random_scale_crop_flip(image, crop_hw, rng, scale_range=(256, 480), flip_p=0.5):
    """Scale augmentation + random crop + horizontal flip for one (C,H,W) image."""
    short = int(rng.integers(scale_range[0], scale_range[1] + 1))
    img = resize_shorter_side(image, short)
    _, h, w = img.shape
    ch, cw = crop_hw
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    img = img[:, top : top + ch, left : left + cw]
    if rng.random() < flip_p:
        img = img[:, :, ::-1]
    return np.ascontiguousarray(img)


def center_crop(image, crop_hw):
    _, h, w = image.shape
    ch, cw = crop_hw
    top = (h - ch) // 2
    left = (w - cw) // 2
    return image[:, top : top + ch, left : left + cw]
