"""Binary PPM (P6) / PGM (P5) reading and writing, plus bilinear resizing."""

from __future__ import annotations

import os

import numpy as np


class ImageFormatError(ValueError):
    pass


def _read_header(data: bytes, magic: bytes):
    if data[:2] != magic:
        raise ImageFormatError(f"bad magic {data[:2]!r}, expected {magic!r}")
    fields = []
    pos = 2
    while len(fields) < 3:
        # skip whitespace and comments
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated or malformed header")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ImageFormatError("malformed header terminator")
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit images supported (maxval={maxval})")
    return width, height, pos + 1


def read_ppm(path) -> np.ndarray:
    """Read an 8-bit P6 file into a (H, W, 3) uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    w, h, offset = _read_header(data, b"P6")
    n = w * h * 3
    if len(data) - offset < n:
        raise ImageFormatError(f"{path}: truncated pixel data ({len(data) - offset} of {n} bytes)")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=offset).reshape(h, w, 3)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    w, h, offset = _read_header(data, b"P5")
    n = w * h
    if len(data) - offset < n:
        raise ImageFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=offset).reshape(h, w)


def _write(path, magic: str, pixels: np.ndarray) -> None:
    h, w = pixels.shape[:2]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())
    os.replace(tmp, path)


def write_ppm(path, rgb: np.ndarray) -> None:
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError("write_ppm needs a (H, W, 3) uint8 array")
    _write(path, "P6", rgb)


def write_pgm(path, gray: np.ndarray) -> None:
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError("write_pgm needs a (H, W) uint8 array")
    _write(path, "P5", gray)


def _axis_weights(n_in: int, n_out: int):
    # pixel-center alignment: output i samples input coordinate (i + 0.5) * n_in / n_out - 0.5
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0.0, n_in - 1)
    lo = np.floor(x).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = x - lo
    return lo, hi, frac


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a (H, W, C) array with pixel-center alignment.

    Returns float64. Same-size input is returned unchanged (as float).
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()
    r0, r1, fr = _axis_weights(h, height)
    c0, c1, fc = _axis_weights(w, width)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def load_image(path, size: tuple[int, int] = (224, 224)) -> np.ndarray:
    """Read a P6 image, resize to ``size`` = (H, W) and scale to [0, 1]."""
    rgb = read_ppm(path)
    if rgb.shape[:2] == tuple(size):
        return rgb.astype(np.float64) / 255.0
    return resize_bilinear(rgb, *size) / 255.0
