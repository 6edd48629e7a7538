"""Grayscale image reading (PGM P5, PNG) and PGM writing."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import FormatError, IngestionError

LUMA = (0.299, 0.587, 0.114)
IMAGE_SUFFIXES = (".pgm", ".png")


def _pgm_tokens(buf: bytes, count: int, path) -> tuple[list, int]:
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IngestionError(f"{path}: truncated PGM header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise FormatError(f"{path}: not a binary (P5) PGM file")
    tokens, offset = _pgm_tokens(buf, 3, path)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise IngestionError(f"{path}: malformed PGM header") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise IngestionError(f"{path}: invalid PGM dimensions or maxval")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    raster = buf[offset:offset + need]
    if len(raster) < need:
        raise IngestionError(f"{path}: truncated PGM raster ({len(raster)} of {need} bytes)")
    pixels = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    return pixels.astype(np.float64) / maxval


def read_png(path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            im.load()
            if im.mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, SyntaxError) as exc:
        raise IngestionError(f"{path}: cannot decode PNG ({exc})") from None
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        return arr.astype(np.float64) / 65535.0
    arr = arr.astype(np.float64)
    if mode == "1":
        return arr
    arr /= 255.0
    if arr.ndim == 3:
        if arr.shape[2] in (3, 4):
            arr = arr[..., 0] * LUMA[0] + arr[..., 1] * LUMA[1] + arr[..., 2] * LUMA[2]
        else:  # LA
            arr = arr[..., 0]
    return arr


def read_image(path) -> np.ndarray:
    """Read a grayscale (or luma-converted) image as float64 in [0, 1], shape (H, W)."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"{path}: no such file")
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic[:2] == b"P5":
        return read_pgm(path)
    if magic == b"\x89PNG\r\n\x1a\n":
        return read_png(path)
    raise FormatError(f"{path}: unsupported image format (expected PGM P5 or PNG)")


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> Path:
    """Write a [0, 1] image as 8-bit P5; values are clamped."""
    img = np.asarray(img, dtype=np.float64)
    img = img.reshape(img.shape[-2:])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(to_uint8(img).tobytes())
    os.replace(tmp, path)
    return path


def list_images(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestionError(f"{directory}: not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())
