"""Raster file I/O: 8-bit PNG, binary PPM, and 8/16-bit grayscale attention maps."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .model import ContractError
from .raster import RasterImage


def to_uint8(data: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(data) * 255.0), 0, 255).astype(np.uint8)


def write_png(image: RasterImage, path: str) -> None:
    Image.fromarray(to_uint8(image.data)).save(path, format="PNG")


def _read_ppm(path: str) -> RasterImage:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ContractError(f"{path}: truncated PPM header")
        fields.append(raw[start:pos])
    pos += 1
    if fields[0] != b"P6":
        raise ContractError(f"{path}: only binary P6 PPM is supported")
    w, h, maxval = (int(f) for f in fields[1:])
    if not 0 < maxval < 65536:
        raise ContractError(f"{path}: bad PPM maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.uint8
    pixels = np.frombuffer(raw, dtype=dtype, count=w * h * 3, offset=pos).reshape(h, w, 3)
    rgb = pixels.astype(np.float64) / maxval
    return RasterImage(np.concatenate([rgb, np.ones((h, w, 1))], axis=-1))


def write_ppm(image: RasterImage, path: str) -> None:
    rgb = to_uint8(image.rgb)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (image.width, image.height))
        fh.write(rgb.tobytes())


def read_image(path: str) -> RasterImage:
    """Load a PNG (any mode, converted to RGBA) or a binary PPM as a straight-alpha image."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if path.lower().endswith((".ppm", ".pnm")):
        return _read_ppm(path)
    with Image.open(path) as im:
        rgba = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
    return RasterImage(rgba)


def write_image(image: RasterImage, path: str) -> None:
    if path.lower().endswith((".ppm", ".pnm")):
        write_ppm(image, path)
    else:
        write_png(image, path)


def read_attention(path: str) -> np.ndarray:
    """Grayscale map rescaled to [0, 1] by its bit depth (16-bit or 8-bit)."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            return np.asarray(im, dtype=np.float64) / 65535.0
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_attention(values: np.ndarray, path: str) -> None:
    """Save a map in [0, 1] as a 16-bit grayscale PNG."""
    data = np.clip(np.rint(np.asarray(values) * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(data).save(path, format="PNG")

