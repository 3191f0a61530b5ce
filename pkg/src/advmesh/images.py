"""Image helpers: float RGB <-> 8-bit PNG, and tiling camera views."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    return (np.clip(np.asarray(img, dtype=float), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(img: np.ndarray, path: str | os.PathLike) -> None:
    a = to_uint8(img)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    Image.fromarray(a).save(path, format="PNG")


def load_png(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0


def tile(views: list[np.ndarray], cols: int = 3, gap: int = 2) -> np.ndarray:
    """Grid of equally sized images separated by white gaps."""
    if not views:
        raise ValueError("nothing to tile")
    h, w = views[0].shape[:2]
    rows = (len(views) + cols - 1) // cols
    out = np.ones((rows * h + (rows - 1) * gap, cols * w + (cols - 1) * gap, 3))
    for k, v in enumerate(views):
        r, c = divmod(k, cols)
        out[r * (h + gap):r * (h + gap) + h, c * (w + gap):c * (w + gap) + w] = v
    return out


def save_ppm(img: np.ndarray, path: str | os.PathLike) -> None:
    """Binary P6 PPM; byte-exact given the same float image."""
    a = to_uint8(img)
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(a[:, :, :3]).tobytes())


def load_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    # header: four whitespace-separated tokens, then exactly one whitespace byte
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            break
        tokens.append(data[start:pos])
    if len(tokens) < 4 or tokens[0] != b"P6" or tokens[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    pix = np.frombuffer(data[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    if pix.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return pix.reshape(h, w, 3).astype(float) / 255.0
