"""Feature representations: a built-in image descriptor, a plain-text feature
store, from-scratch PCA reduction, and cosine similarity.

The toolkit accepts externally computed embeddings through the same feature
file format, so the descriptor here is a self-contained fallback, not a
requirement: pairing only needs some representation in which temporally
adjacent images of a subject stay similar.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FeatureError, PcaError
from .util import atomic_write_text

FEATURE_MAGIC = "SLRF1"

# descriptor layout: 3 x 16 color bins + 4x4 cells x 8 orientation bins + mean/var per channel
COLOR_BINS = 16
ORIENT_BINS = 8
GRID = 4
DESCRIPTOR_DIM = 3 * COLOR_BINS + GRID * GRID * ORIENT_BINS + 6


@dataclass(frozen=True)
class FeatureVector:
    image_id: str
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise FeatureError(f"{self.image_id!r}: feature must be a non-empty 1-D vector")
        if not np.all(np.isfinite(values)):
            raise FeatureError(f"{self.image_id!r}: feature contains non-finite values")
        if float(np.linalg.norm(values)) == 0.0:
            raise FeatureError(f"{self.image_id!r}: zero-norm feature (cosine undefined)")
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return int(self.values.size)


def _l2_block(block: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(block)
    return block / norm if norm > 0 else block


def compute_descriptor(image: np.ndarray, image_id: str = "") -> FeatureVector:
    """Deterministic fixed-length descriptor of an RGB image.

    Concatenates per-channel color histograms, magnitude-weighted gradient
    orientation histograms over a 4x4 spatial grid, and per-channel
    mean/variance; each block is L2-normalized (zero blocks stay zero).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FeatureError(f"descriptor input must be (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    if h == 0 or w == 0:
        raise FeatureError("zero-area image")
    if img.max() > 1.0:
        img = img / 255.0

    blocks: list[np.ndarray] = []
    for c in range(3):
        hist, _ = np.histogram(img[:, :, c], bins=COLOR_BINS, range=(0.0, 1.0))
        blocks.append(_l2_block(hist.astype(np.float64)))

    gray = img.mean(axis=2)
    gy = np.gradient(gray, axis=0) if h >= 2 else np.zeros_like(gray)
    gx = np.gradient(gray, axis=1) if w >= 2 else np.zeros_like(gray)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)  # [-pi, pi]
    bins = np.clip(((ang + np.pi) / (2 * np.pi) * ORIENT_BINS).astype(int), 0, ORIENT_BINS - 1)
    row_edges = [(h * i) // GRID for i in range(GRID + 1)]
    col_edges = [(w * j) // GRID for j in range(GRID + 1)]
    for i in range(GRID):
        for j in range(GRID):
            r0, r1 = row_edges[i], max(row_edges[i + 1], row_edges[i] + 1)
            c0, c1 = col_edges[j], max(col_edges[j + 1], col_edges[j] + 1)
            r1, c1 = min(r1, h), min(c1, w)
            cell_bins = bins[r0:r1, c0:c1].ravel()
            cell_mag = mag[r0:r1, c0:c1].ravel()
            hist = np.bincount(cell_bins, weights=cell_mag, minlength=ORIENT_BINS)
            blocks.append(_l2_block(hist))

    meanvar = np.concatenate([img.mean(axis=(0, 1)), img.var(axis=(0, 1))])
    blocks.append(_l2_block(meanvar))

    values = np.concatenate(blocks)
    assert values.size == DESCRIPTOR_DIM
    return FeatureVector(image_id=image_id, values=values)


def save_features(features: dict[str, FeatureVector], path: Path | str) -> None:
    """Write the ASCII feature file: header `SLRF1 <n> <dim>`, one row per id."""
    if not features:
        raise FeatureError("refusing to save an empty feature map")
    ids = sorted(features)
    dim = features[ids[0]].dim
    lines = [f"{FEATURE_MAGIC} {len(ids)} {dim}"]
    for image_id in ids:
        fv = features[image_id]
        if fv.dim != dim:
            raise FeatureError(f"{image_id!r}: dim {fv.dim} != file dim {dim}")
        if any(c.isspace() for c in image_id) or not image_id:
            raise FeatureError(f"feature id {image_id!r} empty or contains whitespace")
        lines.append(image_id + " " + " ".join(f"{v:.9g}" for v in fv.values))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_features(path: Path | str) -> dict[str, FeatureVector]:
    path = Path(path)
    if not path.exists():
        raise FeatureError(f"feature file not found: {path}")
    with open(path, encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 3 or header[0] != FEATURE_MAGIC:
            raise FeatureError(f"{path}: bad header (expected '{FEATURE_MAGIC} <n> <dim>')")
        try:
            count, dim = int(header[1]), int(header[2])
        except ValueError:
            raise FeatureError(f"{path}: non-integer header counts") from None
        out: dict[str, FeatureVector] = {}
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != dim + 1:
                raise FeatureError(
                    f"{path}:{lineno}: expected id + {dim} values, got {len(parts) - 1}"
                )
            image_id = parts[0]
            if image_id in out:
                raise FeatureError(f"{path}:{lineno}: duplicate id {image_id!r}")
            try:
                values = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError:
                raise FeatureError(f"{path}:{lineno}: unparseable float") from None
            out[image_id] = FeatureVector(image_id=image_id, values=values)
    if len(out) != count:
        raise FeatureError(f"{path}: header declares {count} rows, found {len(out)}")
    return out


@dataclass(frozen=True)
class PcaModel:
    """Orthonormal top-k principal axes of the fitted sample."""

    input_dim: int
    output_dim: int
    mean: np.ndarray
    components: np.ndarray  # (k, d), rows are principal axes
    explained_variance: np.ndarray  # (k,), non-negative, non-increasing

    def transform(self, matrix: np.ndarray) -> np.ndarray:
        return (np.asarray(matrix, dtype=np.float64) - self.mean) @ self.components.T


def _fix_signs(components: np.ndarray) -> np.ndarray:
    # sign convention: the largest-magnitude entry of each axis is non-negative
    out = components.copy()
    for i in range(out.shape[0]):
        j = int(np.argmax(np.abs(out[i])))
        if out[i, j] < 0:
            out[i] = -out[i]
    return out


def fit_pca(vectors: list[FeatureVector] | np.ndarray, k: int) -> PcaModel:
    """Top-k PCA via eigendecomposition of the sample covariance.

    Uses the d x d covariance when d <= n, else the n x n Gram matrix.
    Deterministic: fixed summation order and the sign convention above give
    bit-equal models across runs on one platform.
    """
    if isinstance(vectors, np.ndarray):
        data = np.asarray(vectors, dtype=np.float64)
    else:
        if len(vectors) == 0:
            raise PcaError("no vectors to fit")
        dims = {fv.dim for fv in vectors}
        if len(dims) != 1:
            raise PcaError(f"mixed feature dims {sorted(dims)}")
        data = np.stack([fv.values for fv in vectors])
    n, d = data.shape
    if n < 2:
        raise PcaError(f"need at least 2 vectors, got {n}")
    if not 1 <= k <= min(n - 1, d):
        raise PcaError(f"k={k} outside valid range [1, {min(n - 1, d)}]")

    mean = data.mean(axis=0)
    centered = data - mean
    total_var = float((centered ** 2).sum()) / (n - 1)
    if total_var <= 1e-24:
        raise PcaError("degenerate input: covariance has rank 0 (all vectors identical)", rank=0)

    if d <= n:
        cov = centered.T @ centered / (n - 1)
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals)[::-1][:k]
        variances = eigvals[order]
        components = eigvecs[:, order].T
    else:
        gram = centered @ centered.T / (n - 1)
        eigvals, eigvecs = np.linalg.eigh(gram)
        order = np.argsort(eigvals)[::-1][:k]
        variances = eigvals[order]
        rank = int(np.sum(eigvals > max(eigvals.max(), 0.0) * 1e-12))
        if rank < k:
            raise PcaError(
                f"degenerate input: covariance rank {rank} < requested k={k}", rank=rank
            )
        scale = np.sqrt(variances * (n - 1))
        components = (centered.T @ eigvecs[:, order] / scale).T

    variances = np.clip(variances, 0.0, None)
    components = _fix_signs(np.ascontiguousarray(components))
    return PcaModel(
        input_dim=d, output_dim=k, mean=mean,
        components=components, explained_variance=variances,
    )


def project(model: PcaModel, fv: FeatureVector) -> FeatureVector:
    """Project one vector onto the principal axes: components @ (v - mean).

    A vector equal to the fitted mean projects to zero and is rejected by the
    FeatureVector norm invariant; callers must be prepared for that.
    """
    if fv.dim != model.input_dim:
        raise FeatureError(f"{fv.image_id!r}: dim {fv.dim} != model input dim {model.input_dim}")
    return FeatureVector(image_id=fv.image_id, values=model.components @ (fv.values - model.mean))


def cosine_similarity(a: FeatureVector, b: FeatureVector) -> float:
    """a.b / (|a||b|), clamped to [-1, 1] against round-off."""
    return cosine_from_arrays(a.values, b.values)


def cosine_from_arrays(u: np.ndarray, v: np.ndarray,
                       norm_u: float | None = None, norm_v: float | None = None) -> float:
    if u.shape != v.shape:
        raise FeatureError(f"dim mismatch: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u)) if norm_u is None else norm_u
    nv = float(np.linalg.norm(v)) if norm_v is None else norm_v
    if nu == 0.0 or nv == 0.0:
        raise FeatureError("cosine similarity undefined for zero-norm input")
    return float(min(1.0, max(-1.0, float(np.dot(u, v)) / (nu * nv))))
