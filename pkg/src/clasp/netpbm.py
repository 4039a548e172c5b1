"""Binary PPM (P6) and PGM (P5) readers/writers, 8-bit only."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def _read_header(data: bytes, magic: bytes) -> tuple[int, int, int, int]:
    if not data.startswith(magic):
        raise ValueError(f"expected {magic!r} netpbm file")
    fields, pos = [], 2
    while len(fields) < 3:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"only 8-bit netpbm supported, maxval={maxval}")
    return width, height, maxval, pos + 1


def write_ppm(path, rgb: np.ndarray) -> None:
    """`rgb` is [3, H, W] in [0, 1]."""
    px = np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    h, w, _ = px.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + px.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, _, off = _read_header(data, b"P6")
    px = np.frombuffer(data, np.uint8, count=w * h * 3, offset=off).reshape(h, w, 3)
    return px.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pgm(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("label ids must fit in 8 bits")
    h, w = labels.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + labels.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, _, off = _read_header(data, b"P5")
    return np.frombuffer(data, np.uint8, count=w * h, offset=off).reshape(h, w).astype(np.int64)
