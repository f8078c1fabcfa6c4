"""Data pipeline: dequantization with annealed noise, patchify/unpatchify,
and synthetic class-conditional image corpora.

Images are (H, W, C) float arrays normalized to [0, 1] before dequantization
noise; batches add a leading axis. Token sequences are (N, d) with
N = (H/p)(W/p) and d = C*p*p, a lossless reshaping of the image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DATASET_KINDS = ("checkerboard", "blobs", "bars")


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine-decayed dequantization noise level."""

    sigma_start: float = 0.1
    sigma_end: float = 0.005
    total_steps: int = 20_000

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if self.sigma_start < self.sigma_end:
            raise ValueError("schedule must be non-increasing")


def noise_sigma(step: int, schedule: NoiseSchedule) -> float:
    """Noise std at ``step``: sigma_end + (sigma_start - sigma_end) * (1 + cos(pi t/T)) / 2."""
    if step < 0 or step > schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    span = schedule.sigma_start - schedule.sigma_end
    return schedule.sigma_end + 0.5 * span * (1.0 + np.cos(np.pi * step / schedule.total_steps))


def dequantize(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. Gaussian noise with std ``sigma``; sigma=0 returns a bit-identical copy."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0.0:
        return image.copy()
    return image + rng.normal(0.0, sigma, size=image.shape).astype(image.dtype)


def _check_patch_geometry(h: int, w: int, p: int) -> None:
    if p <= 0:
        raise ValueError("patch size must be positive")
    if h % p or w % p:
        raise ValueError(f"patch size {p} does not divide image {h}x{w}")


def patchify(image: np.ndarray, p: int) -> np.ndarray:
    """Image(s) to token sequence(s): row-major raster of flattened p*p*C patches.

    (H, W, C) -> (N, d) or (B, H, W, C) -> (B, N, d). No compression: the map
    is an exact bijection undone by :func:`unpatchify`.
    """
    squeeze = image.ndim == 3
    if squeeze:
        image = image[None]
    if image.ndim != 4:
        raise ValueError(f"expected (B, H, W, C) or (H, W, C), got {image.shape}")
    b, h, w, c = image.shape
    _check_patch_geometry(h, w, p)
    hp, wp = h // p, w // p
    tokens = (
        image.reshape(b, hp, p, wp, p, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, hp * wp, p * p * c)
    )
    return tokens[0] if squeeze else tokens


def unpatchify(tokens: np.ndarray, p: int, h: int, w: int, c: int) -> np.ndarray:
    """Exact inverse of :func:`patchify` for the given image geometry."""
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens[None]
    _check_patch_geometry(h, w, p)
    hp, wp = h // p, w // p
    b, n, d = tokens.shape
    if n != hp * wp or d != p * p * c:
        raise ValueError(f"token shape {tokens.shape[1:]} incompatible with {h}x{w}x{c}, p={p}")
    image = (
        tokens.reshape(b, hp, wp, p, p, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, h, w, c)
    )
    return image[0] if squeeze else image


def synth_dataset(
    kind: str,
    class_count: int,
    n: int,
    seed: int,
    size: int = 16,
    channels: int = 3,
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic labeled image corpus with visually distinct classes.

    Returns (images (n, size, size, channels) float32 in [0,1], labels (n,)).
    Labels cycle through [0, class_count) so every class is equally covered.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if class_count <= 0:
        raise ValueError("class_count must be positive")
    if kind not in DATASET_KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; choose from {DATASET_KINDS}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % class_count
    yy, xx = np.mgrid[0:size, 0:size]
    images = np.zeros((n, size, size, channels), dtype=np.float32)
    for i in range(n):
        k = int(labels[i])
        if kind == "checkerboard":
            cell = 2 + (k % 3)
            phase = (k // 3) % 2
            board = (((yy // cell) + (xx // cell) + phase) % 2).astype(np.float32)
            lo = 0.1 + 0.05 * rng.random()
            hi = 0.9 - 0.05 * rng.random()
            img = lo + (hi - lo) * board
            base = np.stack([img * (0.6 + 0.4 * ((k + c) % 2)) for c in range(channels)], axis=-1)
        elif kind == "blobs":
            # anchors are class-determined; per-image jitter stays within a pixel
            anchor_rng = np.random.default_rng(10_000 + k)
            anchors = anchor_rng.uniform(0.25, 0.75, size=(k + 1, 2)) * size
            base = np.full((size, size, channels), 0.15, dtype=np.float32)
            for b in range(k + 1):
                cy = anchors[b, 0] + rng.uniform(-1.0, 1.0)
                cx = anchors[b, 1] + rng.uniform(-1.0, 1.0)
                r2 = (size * (0.10 + 0.02 * ((k + b) % 3))) ** 2
                blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * r2))
                ch = (k + b) % channels
                base[:, :, ch] = np.maximum(base[:, :, ch], 0.2 + 0.75 * blob.astype(np.float32))
        else:  # bars
            period = 3 + (k % 3)
            axis = yy if k % 2 == 0 else xx
            offset = rng.integers(0, period)
            stripe = (((axis + offset) // (period // 2 + 1)) % 2).astype(np.float32)
            amp = 0.75 + 0.1 * rng.random()
            base = np.stack(
                [0.1 + amp * stripe * (1.0 if c == k % channels else 0.35) for c in range(channels)],
                axis=-1,
            )
        images[i] = np.clip(base, 0.0, 1.0)
    return images, labels


def class_mean_images(images: np.ndarray, labels: np.ndarray, class_count: int) -> np.ndarray:
    means = np.zeros((class_count,) + images.shape[1:], dtype=np.float64)
    for k in range(class_count):
        sel = images[labels == k]
        if len(sel) == 0:
            raise ValueError(f"class {k} has no samples")
        means[k] = sel.mean(axis=0)
    return means


def nearest_centroid_labels(images: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Assign each image to the closest per-class mean image by L2 distance."""
    flat = images.reshape(len(images), -1).astype(np.float64)
    cent = centroids.reshape(len(centroids), -1)
    d2 = ((flat[:, None, :] - cent[None, :, :]) ** 2).sum(axis=-1)
    return d2.argmin(axis=1)
