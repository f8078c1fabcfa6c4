"""Binary PPM (P6) and PGM (P5) image files, 8-bit maxval.

Float images in [0, 1] are quantized with round-half-up on write; reads are
lossless up to that 8-bit quantization. Malformed input raises
:class:`PpmParseError` carrying the byte offset of the failure.
"""

from __future__ import annotations

import os

import numpy as np


class PpmParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _read_header_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    # skip whitespace and '#' comment lines between header fields
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < n and buf[pos : pos + 1] != b"\n":
                pos += 1
        else:
            break
    if pos >= n:
        raise PpmParseError("unexpected end of header", pos)
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary P6/P5 file into a float32 (H, W, C) array in [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _read_header_token(buf, 0)
    if magic == b"P6":
        channels = 3
    elif magic == b"P5":
        channels = 1
    else:
        raise PpmParseError(f"unsupported magic {magic!r}", 0)
    fields = []
    for name in ("width", "height", "maxval"):
        tok, pos = _read_header_token(buf, pos)
        if not tok.isdigit():
            raise PpmParseError(f"non-numeric {name} field {tok!r}", pos - len(tok))
        fields.append(int(tok))
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise PpmParseError(f"invalid dimensions {width}x{height}", pos)
    if not 0 < maxval < 256:
        raise PpmParseError(f"maxval {maxval} not 8-bit", pos)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise PpmParseError("missing whitespace after maxval", pos)
    pos += 1  # exactly one whitespace byte before the payload
    need = width * height * channels
    payload = buf[pos : pos + need]
    if len(payload) < need:
        raise PpmParseError(
            f"truncated payload: expected {need} bytes, found {len(payload)}", pos + len(payload)
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float32) / maxval
    return pixels.reshape(height, width, channels)


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write (H, W, 3) as P6 or (H, W, 1)/(H, W) as P5, clamping to [0, 1]."""
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3), got {image.shape}")
    h, w, c = image.shape
    magic = b"P6" if c == 3 else b"P5"
    quantized = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(quantized.tobytes())


def write_grid(path: str | os.PathLike, images: np.ndarray, tiles_per_row: int = 8) -> None:
    """Tile a batch of images into one PPM grid, 8 wide by default."""
    n, h, w, c = images.shape
    cols = min(tiles_per_row, n)
    rows = (n + cols - 1) // cols
    grid = np.zeros((rows * h, cols * w, c), dtype=images.dtype)
    for i in range(n):
        r, col = divmod(i, cols)
        grid[r * h : (r + 1) * h, col * w : (col + 1) * w] = images[i]
    write_ppm(path, grid)


def write_dataset_dir(dirpath: str | os.PathLike, images: np.ndarray, labels: np.ndarray) -> list[str]:
    """Write a dataset as numbered PPM files plus a one-label-per-line labels.txt."""
    os.makedirs(dirpath, exist_ok=True)
    names = []
    for i, img in enumerate(images):
        name = f"img_{i:05d}.ppm"
        write_ppm(os.path.join(dirpath, name), img)
        names.append(name)
    with open(os.path.join(dirpath, "labels.txt"), "w") as fh:
        fh.write("\n".join(str(int(l)) for l in labels) + "\n")
    return names + ["labels.txt"]


def read_dataset_dir(dirpath: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    files = sorted(f for f in os.listdir(dirpath) if f.endswith((".ppm", ".pgm")))
    if not files:
        raise FileNotFoundError(f"no .ppm/.pgm files in {dirpath}")
    images = np.stack([read_ppm(os.path.join(dirpath, f)) for f in files])
    with open(os.path.join(dirpath, "labels.txt")) as fh:
        labels = np.array([int(line) for line in fh.read().split()], dtype=np.int64)
    if len(labels) != len(images):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    return images, labels
