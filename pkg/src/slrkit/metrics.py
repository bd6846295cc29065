"""Segmentation metrics: confusion matrix, per-class IoU, mean IoU, pixel
accuracy, mask-vs-mask IoU, and plain-text report emission."""

from __future__ import annotations

from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ValidationError
from .util import atomic_write_text


class ConfusionMatrix:
    """C x C counts; entry [i][j] = pixels of true class i predicted as j.

    Accumulation is associative over disjoint image sets, so partial matrices
    may be built independently and merged with ``+``.
    """

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        if num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {num_classes}")
        self.num_classes = num_classes
        if counts is None:
            self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        else:
            counts = np.asarray(counts, dtype=np.int64)
            if counts.shape != (num_classes, num_classes) or (counts < 0).any():
                raise ValidationError("counts must be a non-negative CxC matrix")
            self.counts = counts.copy()

    def add(self, pred: np.ndarray, truth: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise ValidationError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
        c = self.num_classes
        if pred.size:
            if int(pred.max()) >= c or int(pred.min()) < 0:
                raise ValidationError("prediction class index out of range")
            if int(truth.max()) >= c or int(truth.min()) < 0:
                raise ValidationError("truth class index out of range")
            flat = c * truth.astype(np.int64).ravel() + pred.astype(np.int64).ravel()
            self.counts += np.bincount(flat, minlength=c * c).reshape(c, c)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValidationError("cannot merge confusion matrices of different C")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred_argmax: np.ndarray, mask) -> ConfusionMatrix:
    """Add one image's per-pixel counts to the matrix."""
    truth = np.asarray(getattr(mask, "data", mask))
    return cm.add(pred_argmax, truth)


class SegScores(NamedTuple):
    per_class_iou: np.ndarray  # NaN for classes absent from both pred and truth
    mean_iou: float
    pixel_acc: float


def metrics(cm: ConfusionMatrix) -> SegScores:
    """Per-class IoU, mean IoU over classes with a non-zero denominator, and
    pixel accuracy. Classes absent from both prediction and truth get NaN and
    are excluded from the mean."""
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise ValidationError("empty confusion matrix")
    diag = np.diag(counts)
    denom = counts.sum(axis=0) + counts.sum(axis=1) - diag
    per_class = np.full(cm.num_classes, np.nan)
    present = denom > 0
    per_class[present] = diag[present] / denom[present]
    mean_iou = float(np.mean(per_class[present]))
    pixel_acc = float(diag.sum() / total)
    return SegScores(per_class_iou=per_class, mean_iou=mean_iou, pixel_acc=pixel_acc)


class MaskIou(NamedTuple):
    per_class_iou: np.ndarray
    mean_iou: float


def mask_iou(a, b, num_classes: int | None = None) -> MaskIou:
    """IoU between two label masks, symmetric in (a, b); classes absent from
    both masks are excluded from the mean."""
    arr_a = np.asarray(getattr(a, "data", a))
    arr_b = np.asarray(getattr(b, "data", b))
    if arr_a.shape != arr_b.shape:
        raise ValidationError(f"mask shape mismatch: {arr_a.shape} vs {arr_b.shape}")
    if num_classes is None:
        num_classes = int(max(arr_a.max(initial=0), arr_b.max(initial=0))) + 1
        num_classes = max(num_classes, 2)
    cm = ConfusionMatrix(num_classes).add(arr_b, arr_a)
    scores = metrics(cm)
    return MaskIou(per_class_iou=scores.per_class_iou, mean_iou=scores.mean_iou)


def _fmt(value) -> str:
    if value is None:
        return "NA"
    if isinstance(value, float):
        if np.isnan(value):
            return "NA"
        return f"{value:.6f}"
    return str(value)


def emit_report(out_dir: Path | str, *,
                per_class_iou: dict[str, float] | None = None,
                ablation_grid: Sequence[dict] | None = None,
                ablation_runs: Sequence[dict] | None = None,
                pair_quality: dict | None = None,
                iou_histogram: tuple[np.ndarray, np.ndarray] | None = None,
                config_hash: str | None = None) -> list[Path]:
    """Write whichever report tables were produced; byte-deterministic for
    identical inputs. Missing metrics render as NA (explicit gaps)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prefix = f"# config={config_hash}\n" if config_hash else ""
    written: list[Path] = []

    if per_class_iou is not None:
        lines = [prefix + "class,iou"] if prefix else ["class,iou"]
        for name, iou in per_class_iou.items():
            lines.append(f"{name},{_fmt(iou)}")
        p = out_dir / "per_class_iou.csv"
        atomic_write_text(p, "\n".join(lines) + "\n")
        written.append(p)

    if ablation_grid is not None:
        lines = [prefix + "run,miou,macc"] if prefix else ["run,miou,macc"]
        for row in ablation_grid:
            lines.append(f"{row['run']},{_fmt(row.get('miou'))},{_fmt(row.get('macc'))}")
        p = out_dir / "ablation_grid.csv"
        atomic_write_text(p, "\n".join(lines) + "\n")
        written.append(p)

    if ablation_runs is not None:
        lines = [prefix + "run,seed,miou,macc"] if prefix else ["run,seed,miou,macc"]
        for row in ablation_runs:
            lines.append(
                f"{row['run']},{row['seed']},{_fmt(row.get('miou'))},{_fmt(row.get('macc'))}"
            )
        p = out_dir / "ablation_runs.csv"
        atomic_write_text(p, "\n".join(lines) + "\n")
        written.append(p)

    if pair_quality is not None:
        keys = list(pair_quality)
        lines = [prefix + ",".join(keys)] if prefix else [",".join(keys)]
        lines.append(",".join(_fmt(pair_quality[k]) for k in keys))
        p = out_dir / "pair_quality.csv"
        atomic_write_text(p, "\n".join(lines) + "\n")
        written.append(p)

    if iou_histogram is not None:
        edges, density = iou_histogram
        lines = [prefix + "bin_lo,bin_hi,density"] if prefix else ["bin_lo,bin_hi,density"]
        for i in range(len(density)):
            lines.append(f"{edges[i]:.6f},{edges[i + 1]:.6f},{density[i]:.6f}")
        p = out_dir / "iou_histogram.csv"
        atomic_write_text(p, "\n".join(lines) + "\n")
        written.append(p)

    return written
