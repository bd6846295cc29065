"""Multi-objective loss kernel with exact analytic gradients.

Training optimizes the sum of a supervised term (mean pixel cross entropy
over the labeled stream) and a pair term. The pair term applies the labeled
image's annotation to both images of a pair, weighting the pseudo-labeled
half by two scalars: ``eta``, the fraction of pixels on which the network's
argmax predictions for the two images agree, and ``lambda``, a linear ramp
over training iterations that suppresses early noisy pseudo-label gradients.

All gradients are taken with respect to pre-softmax logits. ``eta`` is a
stop-gradient scalar: no gradient flows through the agreement computation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainClock:
    """Position within a training run; global step = epoch * ipe + iteration."""

    epoch: int
    ipe: int
    iteration: int
    max_iters: int

    def __post_init__(self):
        if self.epoch < 0 or self.ipe < 1 or self.max_iters < 1:
            raise ValidationError(f"bad clock {self}")
        if not 0 <= self.iteration < self.ipe:
            raise ValidationError(f"iteration {self.iteration} outside [0, {self.ipe})")
        if self.global_step >= self.max_iters:
            raise ValidationError(
                f"global step {self.global_step} >= max_iters {self.max_iters}"
            )

    @property
    def global_step(self) -> int:
        return self.epoch * self.ipe + self.iteration


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the trailing axis."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _as_mask(mask) -> np.ndarray:
    return np.asarray(getattr(mask, "data", mask))


def _check_pred(pred: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 3 or pred.shape[2] < 2:
        raise ValidationError(f"prediction must be (H, W, C>=2), got {pred.shape}")
    return pred


def check_prediction_map(pred: np.ndarray, tol: float = 1e-6) -> None:
    """Assert per-pixel probabilities: non-negative, summing to 1 within tol."""
    pred = _check_pred(pred)
    if (pred < 0).any():
        raise ValidationError("negative probability")
    sums = pred.sum(axis=-1)
    if np.abs(sums - 1.0).max() > tol:
        raise ValidationError(f"pixel probabilities sum to {sums.max():.8f} (> {tol} off 1)")


def cross_entropy(pred: np.ndarray, mask) -> tuple[float, np.ndarray]:
    """Mean per-pixel cross entropy and its gradient w.r.t. logits.

    `pred` must come from a softmax over the logits the gradient refers to;
    the gradient per pixel is (p - onehot) / (W*H). Probabilities are clamped
    below at 1e-12 before the log.
    """
    pred = _check_pred(pred)
    truth = _as_mask(mask)
    h, w, c = pred.shape
    if truth.shape != (h, w):
        raise ValidationError(f"mask shape {truth.shape} != prediction spatial shape {(h, w)}")
    if truth.size and (int(truth.max()) >= c or int(truth.min()) < 0):
        raise ValidationError(f"mask class outside [0, {c})")
    rows, cols = np.indices((h, w))
    p_true = pred[rows, cols, truth]
    loss = float(-np.log(np.clip(p_true, PROB_FLOOR, None)).mean())
    grad = pred.copy()
    grad[rows, cols, truth] -= 1.0
    grad /= h * w
    return loss, grad


def supervised_loss(batch: Sequence[tuple[np.ndarray, object]]) -> float:
    """Mean of per-image cross entropies over a labeled batch."""
    loss, _ = supervised_loss_grads(batch)
    return loss


def supervised_loss_grads(batch) -> tuple[float, list[np.ndarray]]:
    if not batch:
        raise ValidationError("empty labeled batch")
    n = len(batch)
    losses, grads = [], []
    for pred, mask in batch:
        ce, g = cross_entropy(pred, mask)
        losses.append(ce)
        grads.append(g / n)
    return float(np.mean(losses)), grads


def eta(pred1: np.ndarray, pred2: np.ndarray, include_background: bool = True) -> float:
    """Fraction of pixels where the argmax classes of the two maps agree.

    Argmax ties break toward the lower class index for both maps, so
    identical inputs always score 1. With include_background=False, pixels
    where both maps pick class 0 are dropped from numerator and denominator
    (an all-background agreement still scores 1).
    """
    pred1 = _check_pred(pred1)
    pred2 = _check_pred(pred2)
    if pred1.shape != pred2.shape:
        raise ValidationError(f"shape mismatch: {pred1.shape} vs {pred2.shape}")
    a = pred1.argmax(axis=-1)
    b = pred2.argmax(axis=-1)
    agree = a == b
    if include_background:
        return float(agree.mean())
    informative = ~((a == 0) & (b == 0))
    if not informative.any():
        return 1.0
    return float(agree[informative].mean())


def lambda_weight(clock: TrainClock) -> float:
    """Linear ramp (epoch * ipe + iteration) / max_iters, in [0, 1)."""
    return clock.global_step / clock.max_iters


@dataclass(frozen=True)
class PairLossResult:
    loss: float
    labeled_half: float
    pseudo_half: float
    eta_values: list[float]
    lambda_value: float
    grads_labeled: list[np.ndarray]
    grads_pseudo: list[np.ndarray]


def pair_loss_grads(pair_batch, clock: TrainClock, *,
                    use_eta: bool = True, use_lambda: bool = True,
                    eta_include_background: bool = True) -> PairLossResult:
    """Pair objective: mean CE on the labeled half plus the lambda/eta-damped
    mean CE of the pseudo-labeled half, with gradients for both halves.

    The eta values are treated as constants during gradient computation.
    Disabling eta or lambda pins the corresponding weight at 1 (ablations).
    """
    if not pair_batch:
        raise ValidationError("empty pair batch")
    lam = lambda_weight(clock) if use_lambda else 1.0
    n = len(pair_batch)
    ce_l_list, ce_pl_list, etas = [], [], []
    grads_l, grads_pl = [], []
    for pred_l, pred_pl, mask in pair_batch:
        ce_l, g_l = cross_entropy(pred_l, mask)
        ce_pl, g_pl = cross_entropy(pred_pl, mask)
        e = eta(pred_l, pred_pl, include_background=eta_include_background) if use_eta else 1.0
        ce_l_list.append(ce_l)
        ce_pl_list.append(ce_pl)
        etas.append(e)
        grads_l.append(g_l / n)
        grads_pl.append(lam * e * g_pl / n)
    labeled_half = float(np.mean(ce_l_list))
    pseudo_half = float(np.mean([lam * e * ce for e, ce in zip(etas, ce_pl_list)]))
    return PairLossResult(
        loss=labeled_half + pseudo_half,
        labeled_half=labeled_half,
        pseudo_half=pseudo_half,
        eta_values=etas,
        lambda_value=lam,
        grads_labeled=grads_l,
        grads_pseudo=grads_pl,
    )


def pair_loss(pair_batch, clock: TrainClock, *,
              use_eta: bool = True, use_lambda: bool = True,
              eta_include_background: bool = True) -> tuple[float, list[float]]:
    """Scalar pair objective plus the per-pair eta values."""
    res = pair_loss_grads(
        pair_batch, clock, use_eta=use_eta, use_lambda=use_lambda,
        eta_include_background=eta_include_background,
    )
    return res.loss, res.eta_values


def total_loss(sup: float, pair: float) -> float:
    """Sum of the supervised and pair objectives."""
    if not (np.isfinite(sup) and np.isfinite(pair)):
        raise ValidationError(f"non-finite loss components: sup={sup}, pair={pair}")
    return float(sup + pair)
