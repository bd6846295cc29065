"""Binary netpbm I/O: P6 (PPM, 8-bit RGB) images and P5 (PGM, 8-bit) masks."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .errors import ValidationError


def _read_header_tokens(f: io.BufferedReader, count: int) -> list[int]:
    """Read `count` whitespace-separated integer tokens, honoring # comments."""
    tokens: list[int] = []
    while len(tokens) < count:
        ch = f.read(1)
        if not ch:
            raise ValidationError("truncated netpbm header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            continue
        tok = bytearray()
        while ch and not ch.isspace():
            if ch == b"#":
                break
            tok += ch
            ch = f.read(1)
        try:
            tokens.append(int(tok.decode("ascii")))
        except (UnicodeDecodeError, ValueError):
            raise ValidationError(f"bad netpbm header token {bytes(tok)!r}") from None
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
    return tokens


def _read_netpbm(path: Path | str, magic: bytes, channels: int) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        got = f.read(2)
        if got != magic:
            raise ValidationError(f"{path}: expected {magic.decode()} magic, found {got!r}")
        width, height, maxval = _read_header_tokens(f, 3)
        if width <= 0 or height <= 0:
            raise ValidationError(f"{path}: non-positive dimensions {width}x{height}")
        if not 0 < maxval < 256:
            raise ValidationError(f"{path}: maxval {maxval} outside 8-bit range")
        expected = width * height * channels
        raw = f.read(expected)
        if len(raw) != expected:
            raise ValidationError(
                f"{path}: truncated pixel data ({len(raw)} of {expected} bytes)"
            )
    data = np.frombuffer(raw, dtype=np.uint8)
    if channels == 1:
        return data.reshape(height, width).copy()
    return data.reshape(height, width, channels).copy()


def read_ppm(path: Path | str) -> np.ndarray:
    """Read a binary P6 image as a (H, W, 3) uint8 array."""
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path: Path | str) -> np.ndarray:
    """Read a binary P5 image as a (H, W) uint8 array."""
    return _read_netpbm(path, b"P5", 1)


def write_ppm(path: Path | str, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"PPM image must be (H, W, 3), got {image.shape}")
    _write_netpbm(path, b"P6", image)


def write_pgm(path: Path | str, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValidationError(f"PGM image must be (H, W), got {image.shape}")
    _write_netpbm(path, b"P5", image)


def _write_netpbm(path: Path | str, magic: bytes, image: np.ndarray) -> None:
    if image.dtype != np.uint8:
        if image.min() < 0 or image.max() > 255:
            raise ValidationError("pixel values outside [0, 255]")
        image = image.astype(np.uint8)
    height, width = image.shape[:2]
    if height == 0 or width == 0:
        raise ValidationError("refusing to write zero-area image")
    header = magic + b"\n" + f"{width} {height}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(image.tobytes())
