"""Single-channel raster images with a validity mask, plus PGM I/O."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

MIN_SIZE = 8


@dataclass
class RasterImage:
    """Intensities on a pixel grid; pixel (row i, col j) has center (x=j, y=i)."""

    data: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2:
            raise ValueError("raster must be 2-D")
        if min(self.data.shape) < MIN_SIZE:
            raise ValueError(f"raster must be at least {MIN_SIZE}x{MIN_SIZE}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("raster intensities must be finite")
        if self.valid is None:
            self.valid = np.ones(self.data.shape, dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.data.shape:
                raise ValueError("mask shape mismatch")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def write_pgm(path, image: RasterImage, plain: bool = False) -> None:
    """Write intensities in [0, 1] as 8-bit PGM (binary P5, or plain P2)."""
    q = np.clip(np.rint(image.data * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    path = Path(path)
    if plain:
        lines = [f"P2\n{w} {h}\n255\n"]
        lines += [" ".join(str(v) for v in row) + "\n" for row in q]
        path.write_text("".join(lines), encoding="utf-8", newline="\n")
    else:
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def read_pgm(path) -> RasterImage:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    # header: magic, width, height, maxval; '#' comments allowed
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == "P5":
        pos += 1
        data = np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8).reshape(h, w)
    elif magic == "P2":
        data = np.array(raw[pos:].split(), dtype=np.int64)[: w * h].reshape(h, w)
    else:
        raise ValueError(f"unsupported PGM magic {magic!r}")
    return RasterImage(data.astype(float) / maxval)
