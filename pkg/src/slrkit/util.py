"""Small shared helpers: atomic writes, capped parallel map, image resizing."""

from __future__ import annotations

import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")


def atomic_write_bytes(path: Path | str, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path | str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def resolve_threads(threads: int | None) -> int:
    """Effective worker count: explicit value, SLR_THREADS, or CPU count."""
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("SLR_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int | None = None) -> list[R]:
    """Map preserving input order; runs sequentially when one worker suffices."""
    workers = min(resolve_threads(threads), len(items)) if items else 1
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a (H, W, C) or (H, W) float/uint8 array."""
    src = np.asarray(image, dtype=np.float64)
    h, w = src.shape[:2]
    if (h, w) == (height, width):
        return src.copy()
    ys = (np.arange(height) + 0.5) * (h / height) - 0.5
    xs = (np.arange(width) + 0.5) * (w / width) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    if src.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_mask(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbor resize preserving integer class labels."""
    src = np.asarray(mask)
    h, w = src.shape[:2]
    if (h, w) == (height, width):
        return src.copy()
    ys = np.clip(((np.arange(height) + 0.5) * (h / height)).astype(int), 0, h - 1)
    xs = np.clip(((np.arange(width) + 0.5) * (w / width)).astype(int), 0, w - 1)
    return src[ys][:, xs].copy()
