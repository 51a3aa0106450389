"""Training objective (forward values only) and segmentation metrics.

Label maps are integer ``H x W`` arrays; pixels equal to ``ignore_index``
take no part in any loss or metric. Probabilities are clamped to
``[PROB_EPS, 1]`` before every logarithm.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import bilinear_upsample, softmax

PROB_EPS = 1e-12
IGNORE_INDEX = 255
DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 0.4


class AllIgnoredWarning(UserWarning):
    """Every pixel of a label map carries the ignore value."""


def _log(p: np.ndarray) -> np.ndarray:
    return np.log(np.clip(p, PROB_EPS, 1.0))


def cross_entropy(probs: np.ndarray, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> float:
    """Mean of ``-log p[true class]`` over the non-ignored pixels.

    ``probs`` is ``C x H x W`` and ``labels`` is ``H x W``. A map with no valid
    pixel yields 0.0 and an :class:`AllIgnoredWarning`.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.ndim != 3 or probs.shape[1:] != labels.shape:
        raise ShapeError(f"probabilities {probs.shape} do not match labels {labels.shape}")
    valid = labels != ignore_index
    if not valid.any():
        warnings.warn("all pixels are ignored; cross-entropy defined as 0", AllIgnoredWarning, stacklevel=2)
        return 0.0
    cls = labels[valid]
    if cls.min() < 0 or cls.max() >= probs.shape[0]:
        raise ShapeError(f"labels must lie in [0, {probs.shape[0]}) or equal {ignore_index}")
    picked = probs[:, valid][cls, np.arange(cls.size)]
    return float(-_log(picked).mean())


def upsample_probs(probs: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a probability map, renormalised so each pixel sums to one."""
    up = bilinear_upsample(probs, out_h, out_w)
    return up / up.sum(axis=0, keepdims=True)


def aux_loss(aux_probs, labels: np.ndarray, full_h: int, full_w: int, ignore_index: int = IGNORE_INDEX) -> float:
    """Sum over probe heads of the cross-entropy of their upsampled maps."""
    aux_probs = list(aux_probs)
    if not aux_probs:
        raise ConfigError("aux_loss needs at least one probe map")
    return float(sum(cross_entropy(upsample_probs(p, full_h, full_w), labels, ignore_index) for p in aux_probs))


def kl_self_distill(p_student: np.ndarray, p_teacher: np.ndarray) -> float:
    """Pixel-mean of KL(student || teacher), with 0 * log 0 taken as 0."""
    ps = np.asarray(p_student)
    pt = np.asarray(p_teacher)
    if ps.shape != pt.shape:
        raise ShapeError(f"student {ps.shape} and teacher {pt.shape} maps differ in shape")
    terms = np.where(ps > 0, ps * (_log(ps) - _log(pt)), 0.0)
    pixels = int(np.prod(ps.shape[1:]))
    return float(terms.reshape(ps.shape[0], pixels).sum(axis=0).mean())


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    aux: float
    sd: float
    alpha: float
    beta: float
    total: float

    def to_dict(self) -> dict:
        return dict(vars(self))


def total_loss(ce: float, aux: float, sd: float, alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA) -> LossBreakdown:
    if not (alpha > 0 and beta > 0):
        raise ConfigError(f"loss weights must be positive, got alpha={alpha}, beta={beta}")
    return LossBreakdown(ce, aux, sd, alpha, beta, ce + alpha * aux + beta * sd)


def report_losses(report, labels, teacher=None, alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA,
                  ignore_index: int = IGNORE_INDEX) -> LossBreakdown:
    """Objective evaluated on the exact arrays a forward pass predicted with.

    ``report`` (and the optional dense ``teacher``) are engine SegReports; no
    forward is recomputed here.
    """
    h, w = report.final_probs.shape[1:]
    ce = cross_entropy(report.final_probs, labels, ignore_index)
    aux = aux_loss(report.aux_probs, labels, h, w, ignore_index) if report.aux_probs else 0.0
    sd = kl_self_distill(report.final_probs, teacher.final_probs) if teacher is not None else 0.0
    return total_loss(ce, aux, sd, alpha, beta)


def softmax_ce_gradient(logits: np.ndarray, true_class: int) -> np.ndarray:
    """Gradient of ``-log softmax(logits)[true_class]`` with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= true_class < logits.shape[0]:
        raise IndexError(f"class {true_class} out of range for {logits.shape[0]} logits")
    grad = softmax(logits)
    grad[true_class] -= 1.0
    return grad


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """``C x C`` counts, rows indexed by ground truth and columns by prediction."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    valid = (gt != ignore_index) & (gt >= 0) & (gt < num_classes) & (pred >= 0) & (pred < num_classes)
    idx = gt[valid].astype(np.int64) * num_classes + pred[valid].astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def metrics_from_confusion(cm: np.ndarray) -> dict:
    """mIoU, pixel accuracy and mean pixel accuracy (percent) from a confusion matrix.

    Classes that appear in neither prediction nor ground truth are left out of
    the mIoU mean; classes absent from the ground truth are left out of the
    mPA mean.
    """
    tp = np.diag(cm).astype(np.float64)
    gt_count = cm.sum(axis=1)
    pred_count = cm.sum(axis=0)
    union = gt_count + pred_count - tp
    total = cm.sum()
    present = union > 0
    in_gt = gt_count > 0
    return {
        "miou": float(100.0 * (tp[present] / union[present]).mean()) if present.any() else 0.0,
        "pa": float(100.0 * tp.sum() / total) if total else 0.0,
        "mpa": float(100.0 * (tp[in_gt] / gt_count[in_gt]).mean()) if in_gt.any() else 0.0,
        "confusion": cm,
    }


def segmentation_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_index: int = IGNORE_INDEX) -> dict:
    return metrics_from_confusion(confusion_matrix(pred, gt, num_classes, ignore_index))
