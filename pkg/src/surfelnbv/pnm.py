"""Minimal binary PPM/PGM writer and reader for channel dumps."""

from __future__ import annotations

import numpy as np


def _to_u8(img: np.ndarray, lo: float, hi: float) -> np.ndarray:
    scaled = (np.asarray(img, float) - lo) / (hi - lo) if hi > lo else np.zeros_like(img, dtype=float)
    return np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> None:
    data = _to_u8(rgb, lo, hi)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def write_pgm(path, gray: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> None:
    data = _to_u8(gray, lo, hi)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_pnm(path) -> np.ndarray:
    """uint8 array (H, W) for P5 or (H, W, 3) for P6."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode())
    magic, w, h = tokens[0], int(tokens[1]), int(tokens[2])
    body = np.frombuffer(raw[pos + 1:], dtype=np.uint8)
    if magic == "P6":
        return body[: w * h * 3].reshape(h, w, 3)
    if magic == "P5":
        return body[: w * h].reshape(h, w)
    raise ValueError(f"unsupported image type {magic}")
