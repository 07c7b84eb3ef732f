"""Datasets, preprocessing and in-enclave style augmentation.

Images are uint8 arrays shaped (N, 3, 32, 32), channel-major like the
CIFAR-10 binary format; networks consume float32 (N, 3, 28, 28) crops in
[0, 1].

Because the build environment has no copy of CIFAR-10, a synthetic
ring-pattern corpus with the same shape and label layout stands in by
default.  Class identity is carried by radial frequency plus a color cast,
both of which survive crops, flips and small rotations, so small CNNs learn
it quickly.  ``load_cifar10_dir`` reads the standard binary distribution
when one is available locally.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FileFormatError, UsageError
from .rng import DeterministicRng

IMAGE_DIMS = (3, 32, 32)
CROP_HW = 28
NUM_CLASSES = 10

_RING_FREQ = np.array([1.0, 1.6, 2.2, 2.8, 3.4, 4.0, 4.6, 5.2, 5.8, 6.4])
_COLOR_CAST = np.array(
    [
        [1.00, 0.55, 0.55],
        [0.55, 1.00, 0.55],
        [0.55, 0.55, 1.00],
        [1.00, 1.00, 0.50],
        [1.00, 0.55, 1.00],
        [0.55, 1.00, 1.00],
        [1.00, 0.80, 0.55],
        [0.70, 0.70, 1.00],
        [0.85, 1.00, 0.70],
        [0.95, 0.95, 0.95],
    ]
)


def synthetic_corpus(count: int, rng: DeterministicRng, stream: str = "train"):
    """Balanced synthetic image corpus: (images u8 (N,3,32,32), labels u16)."""
    gen = rng.generator("synthetic", stream)
    labels = np.arange(count, dtype=np.uint16) % NUM_CLASSES
    gen_perm = rng.generator("synthetic-perm", stream)
    labels = labels[gen_perm.permutation(count)]

    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    images = np.empty((count, 3, 32, 32), dtype=np.uint8)
    for i in range(count):
        c = int(labels[i])
        phase = gen.uniform(0.0, 2 * np.pi)
        cx = 15.5 + gen.uniform(-3.0, 3.0)
        cy = 15.5 + gen.uniform(-3.0, 3.0)
        amp = gen.uniform(0.32, 0.45)
        r = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2) / 16.0
        base = 0.5 + amp * np.cos(2 * np.pi * _RING_FREQ[c] * r + phase)
        noise = gen.normal(0.0, 0.10, size=(3, 32, 32))
        img = base[None, :, :] * (0.35 + 0.65 * _COLOR_CAST[c][:, None, None]) + noise
        images[i] = np.clip(img * 255.0, 0, 255).astype(np.uint8)
    return images, labels


def load_cifar10_dir(path: str, limit: int | None = None):
    """Read the CIFAR-10 binary batches (data_batch_*.bin) under ``path``."""
    names = [f"data_batch_{i}.bin" for i in range(1, 6)]
    files = [os.path.join(path, n) for n in names if os.path.exists(os.path.join(path, n))]
    if not files:
        raise FileFormatError(f"no CIFAR-10 binary batches under {path}")
    images, labels = [], []
    for fn in files:
        with open(fn, "rb") as fh:
            raw = fh.read()
        if len(raw) % 3073 != 0:
            raise FileFormatError(f"{fn}: not a CIFAR-10 binary batch")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3073)
        labels.append(arr[:, 0].astype(np.uint16))
        images.append(arr[:, 1:].reshape(-1, 3, 32, 32))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return images.copy(), labels.copy()


def load_npz(path: str, limit: int | None = None):
    with np.load(path) as z:
        images = z["images"]
        labels = z["labels"]
    if images.ndim != 4 or images.shape[1:] != IMAGE_DIMS or images.dtype != np.uint8:
        raise FileFormatError(f"{path}: images must be uint8 (N,3,32,32)")
    labels = labels.astype(np.uint16)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return images, labels


def save_npz(path: str, images: np.ndarray, labels: np.ndarray) -> None:
    np.savez(path, images=images, labels=labels)


def load_dataset(source: str, limit: int | None = None):
    """Resolve a dataset argument.

    Accepts a .npz path, a CIFAR-10 binary directory, or a
    ``synthetic:<count>:<seed>[:<stream>]`` descriptor.
    """
    if source.startswith("synthetic:"):
        parts = source.split(":")
        if len(parts) not in (3, 4):
            raise UsageError("expected synthetic:<count>:<seed>[:<stream>]")
        count, seed = int(parts[1]), int(parts[2])
        stream = parts[3] if len(parts) == 4 else "train"
        if limit is not None:
            count = min(count, limit)
        return synthetic_corpus(count, DeterministicRng(seed), stream=stream)
    if os.path.isdir(source):
        return load_cifar10_dir(source, limit=limit)
    return load_npz(source, limit=limit)


# ----- preprocessing ---------------------------------------------------------


def horizontal_flip(x: np.ndarray) -> np.ndarray:
    """Mirror (C,H,W) along the width axis; involutive."""
    return x[:, :, ::-1]


def _rotate_nn(x: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate (C,H,W) about the image center, nearest-neighbor, edge-clamped."""
    if degrees == 0.0:
        return x
    _, h, w = x.shape
    theta = np.deg2rad(degrees)
    cos, sin = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ys, xs = yy - cy, xx - cx
    # sample source coordinates with the inverse rotation
    src_y = cos * ys + sin * xs + cy
    src_x = -sin * ys + cos * xs + cx
    iy = np.clip(np.rint(src_y).astype(np.int64), 0, h - 1)
    ix = np.clip(np.rint(src_x).astype(np.int64), 0, w - 1)
    return x[:, iy, ix]


def augment(image_u8: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    """Random crop, flip, rotate, brightness-jitter one (3,32,32) instance.

    Returns float32 (3,28,28) in [0,1].  Draw order is part of the
    determinism contract; do not reorder.
    """
    if image_u8.shape != IMAGE_DIMS:
        raise UsageError(f"augment expects {IMAGE_DIMS}, got {image_u8.shape}")
    span = IMAGE_DIMS[1] - CROP_HW
    ox = int(gen.integers(0, span + 1))
    oy = int(gen.integers(0, span + 1))
    flip = bool(gen.integers(0, 2))
    angle = float(gen.uniform(-15.0, 15.0))
    jitter = gen.uniform(0.9, 1.1, size=3).astype(np.float32)

    x = image_u8[:, oy : oy + CROP_HW, ox : ox + CROP_HW].astype(np.float32) / np.float32(255.0)
    if flip:
        x = horizontal_flip(x)
    x = _rotate_nn(x, angle)
    x = np.clip(x * jitter[:, None, None], 0.0, 1.0).astype(np.float32)
    return x


def center_crop(images_u8: np.ndarray) -> np.ndarray:
    """Deterministic inference preprocessing: (N,3,32,32) u8 -> f32 (N,3,28,28)."""
    off = (IMAGE_DIMS[1] - CROP_HW) // 2
    x = images_u8[:, :, off : off + CROP_HW, off : off + CROP_HW]
    return x.astype(np.float32) / np.float32(255.0)


def image_bytes(image_u8: np.ndarray) -> bytes:
    """Canonical plaintext byte representation of one instance (for hashing)."""
    return np.ascontiguousarray(image_u8, dtype=np.uint8).tobytes()


# ----- PNG convenience for the CLI -------------------------------------------


def load_image_file(path: str) -> np.ndarray:
    """Read an image file into the (3,32,32) uint8 layout."""
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB").resize((32, 32), Image.NEAREST)
        arr = np.asarray(im, dtype=np.uint8)
    return arr.transpose(2, 0, 1).copy()


def save_image_file(path: str, image_u8: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(image_u8.transpose(1, 2, 0)).save(path)
