"""A small fully-convolutional per-pixel classifier with hand-derived
gradients: two 3x3 same-padded conv+ReLU stages and a 1x1 classification
head, softmaxed per pixel. Everything runs in plain numpy."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .losses import softmax

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "head_w", "head_b")


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(H, W, Cin) -> (H*W, 9*Cin) patches of the zero-padded input."""
    h, w, cin = x.shape
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    cols = np.empty((h * w, 9 * cin), dtype=x.dtype)
    k = 0
    for di in range(3):
        for dj in range(3):
            cols[:, k * cin:(k + 1) * cin] = padded[di:di + h, dj:dj + w, :].reshape(h * w, cin)
            k += 1
    return cols


def _col2im3(dcols: np.ndarray, h: int, w: int, cin: int) -> np.ndarray:
    """Adjoint of _im2col3: scatter patch gradients back onto the input."""
    dpadded = np.zeros((h + 2, w + 2, cin), dtype=dcols.dtype)
    k = 0
    for di in range(3):
        for dj in range(3):
            dpadded[di:di + h, dj:dj + w, :] += dcols[:, k * cin:(k + 1) * cin].reshape(h, w, cin)
            k += 1
    return dpadded[1:-1, 1:-1, :]


class ToyNet:
    """conv3x3 -> ReLU -> conv3x3 -> ReLU -> 1x1 head -> per-pixel softmax."""

    def __init__(self, params: dict[str, np.ndarray]):
        missing = [n for n in PARAM_NAMES if n not in params]
        if missing:
            raise ValidationError(f"missing parameters: {missing}")
        self.params = params

    @classmethod
    def init(cls, num_classes: int, f1: int = 8, f2: int = 8,
             rng: np.random.Generator | None = None,
             dtype=np.float64) -> "ToyNet":
        if num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {num_classes}")
        rng = rng or np.random.default_rng(0)
        def he(shape, fan_in):
            return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        params = {
            "conv1_w": he((3, 3, 3, f1), 9 * 3),
            "conv1_b": np.zeros(f1, dtype=dtype),
            "conv2_w": he((3, 3, f1, f2), 9 * f1),
            "conv2_b": np.zeros(f2, dtype=dtype),
            "head_w": he((f2, num_classes), f2),
            "head_b": np.zeros(num_classes, dtype=dtype),
        }
        return cls(params)

    @property
    def num_classes(self) -> int:
        return self.params["head_w"].shape[1]

    @property
    def dtype(self):
        return self.params["conv1_w"].dtype

    def copy(self) -> "ToyNet":
        return ToyNet({k: v.copy() for k, v in self.params.items()})

    def forward(self, image: np.ndarray) -> tuple[np.ndarray, dict]:
        """Per-pixel class probabilities plus the cache backward() needs."""
        x = np.asarray(image, dtype=self.dtype)
        if x.ndim != 3 or x.shape[2] != 3:
            raise ValidationError(f"input must be (H, W, 3), got {x.shape}")
        h, w = x.shape[:2]
        if h < 3 or w < 3:
            raise ValidationError(f"input spatial dims must be >= 3x3, got {h}x{w}")
        p = self.params

        cols1 = _im2col3(x)
        z1 = cols1 @ p["conv1_w"].reshape(-1, p["conv1_w"].shape[3]) + p["conv1_b"]
        a1 = np.maximum(z1, 0.0)
        f1 = a1.shape[1]

        cols2 = _im2col3(a1.reshape(h, w, f1))
        z2 = cols2 @ p["conv2_w"].reshape(-1, p["conv2_w"].shape[3]) + p["conv2_b"]
        a2 = np.maximum(z2, 0.0)

        logits = a2 @ p["head_w"] + p["head_b"]
        probs = softmax(logits).reshape(h, w, self.num_classes)
        cache = {
            "shape": (h, w),
            "cols1": cols1, "z1": z1, "cols2": cols2, "z2": z2, "a2": a2,
        }
        return probs, cache

    def backward(self, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Exact parameter gradients for an upstream gradient w.r.t. logits."""
        h, w = cache["shape"]
        if dlogits.shape != (h, w, self.num_classes):
            raise ValidationError(
                f"dlogits shape {dlogits.shape} != expected {(h, w, self.num_classes)}"
            )
        p = self.params
        dl = np.asarray(dlogits, dtype=self.dtype).reshape(h * w, self.num_classes)

        grads: dict[str, np.ndarray] = {}
        grads["head_w"] = cache["a2"].T @ dl
        grads["head_b"] = dl.sum(axis=0)
        da2 = dl @ p["head_w"].T

        dz2 = da2 * (cache["z2"] > 0)
        f2 = dz2.shape[1]
        grads["conv2_w"] = (cache["cols2"].T @ dz2).reshape(p["conv2_w"].shape)
        grads["conv2_b"] = dz2.sum(axis=0)
        dcols2 = dz2 @ p["conv2_w"].reshape(-1, f2).T
        f1 = p["conv1_w"].shape[3]
        da1 = _col2im3(dcols2, h, w, f1).reshape(h * w, f1)

        dz1 = da1 * (cache["z1"] > 0)
        grads["conv1_w"] = (cache["cols1"].T @ dz1).reshape(p["conv1_w"].shape)
        grads["conv1_b"] = dz1.sum(axis=0)
        return grads

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}
