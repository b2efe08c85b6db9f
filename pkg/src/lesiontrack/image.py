"""Grayscale image container and 16-bit binary PGM I/O."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class Image:
    """Intensities in [0, 1], row-major ``data[row, col]``; ``spacing_mm`` per pixel."""
    data: np.ndarray
    spacing_mm: float = 1.0

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.size == 0:
            raise DataError(f"image must be a nonempty 2-D grid, got shape {self.data.shape}")
        if not self.spacing_mm > 0:
            raise DataError(f"spacing_mm must be positive, got {self.spacing_mm}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def write_pgm(path, img: Image | np.ndarray):
    data = img.data if isinstance(img, Image) else np.asarray(img)
    q = np.round(np.clip(data, 0.0, 1.0) * 65535.0).astype(">u2")
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm(path, spacing_mm: float = 1.0) -> Image:
    if not os.path.exists(path):
        raise DataError(f"image file not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    pos += 1  # single whitespace byte after maxval
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {magic!r})")
    dtype = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return Image(arr.astype(np.float64) / maxval, spacing_mm)
