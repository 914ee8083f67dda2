"""Losses and evaluation metrics.

Parameter/keypoint losses for supervised fitting, multi-class segmentation
losses over voxel grids, segmentation and keypoint metrics (overlap score,
symmetric Hausdorff, correct-keypoint curves), and the shape-space
compactness / leave-one-out generalization curves.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import LabeledVolume, TriangleMesh, point_set_distances
from .model import ShapeBasis
from .numerics import pca

__all__ = [
    "EvaluationCurve",
    "loss_parameters",
    "loss_joints",
    "loss_combined",
    "loss_shape_reg",
    "loss_bce",
    "loss_dice",
    "metric_dice",
    "metric_hausdorff",
    "metric_pck",
    "metric_joint_error",
    "metric_joint_squared_error",
    "eval_compactness",
    "eval_generalization",
]

_CLAMP = 1e-7


@dataclass(frozen=True)
class EvaluationCurve:
    """Metric values sampled over component counts or thresholds."""

    x: np.ndarray
    y: np.ndarray
    y_std: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if x.ndim != 1 or x.shape != y.shape:
            raise ValueError("x and y must be equal-length vectors")
        if x.size > 1 and np.any(np.diff(x) <= 0):
            raise ValueError("x must be strictly increasing")
        if self.y_std is not None:
            std = np.asarray(self.y_std, dtype=float)
            if std.shape != y.shape:
                raise ValueError("y_std must match y")
            object.__setattr__(self, "y_std", std)


# ---------------------------------------------------------------------------
# Fitting losses


def loss_parameters(shape_hat, pose_hat, shape_ref, pose_ref) -> float:
    """Squared L2 error over the concatenated shape and pose parameters."""
    a = np.concatenate([np.ravel(shape_hat), np.ravel(pose_hat)])
    b = np.concatenate([np.ravel(shape_ref), np.ravel(pose_ref)])
    if a.shape != b.shape:
        raise ValueError("parameter dimensions disagree")
    d = a - b
    return float(d @ d)


def loss_joints(keypoints_hat: np.ndarray, keypoints_ref: np.ndarray) -> float:
    """Squared L2 error over stacked keypoint coordinates."""
    a = np.asarray(keypoints_hat, dtype=float)
    b = np.asarray(keypoints_ref, dtype=float)
    if a.shape != b.shape:
        raise ValueError("keypoint sets disagree in shape")
    d = (a - b).ravel()
    return float(d @ d)


def loss_combined(shape_hat, pose_hat, keypoints_hat,
                  shape_ref, pose_ref, keypoints_ref) -> float:
    """Parameter loss plus keypoint loss."""
    return loss_parameters(shape_hat, pose_hat, shape_ref, pose_ref) + loss_joints(
        keypoints_hat, keypoints_ref
    )


def loss_shape_reg(shape) -> float:
    """Squared norm of the shape coefficients (pull toward the mean shape)."""
    b = np.ravel(np.asarray(shape, dtype=float))
    return float(b @ b)


def _check_class_arrays(pred, target):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape or pred.ndim < 2:
        raise ValueError("predictions and one-hot targets must share shape (..., K)")
    return pred.reshape(-1, pred.shape[-1]), target.reshape(-1, target.shape[-1])


def loss_bce(pred: np.ndarray, target_onehot: np.ndarray) -> float:
    """Multi-class binary cross entropy, averaged over classes and voxels.

    Probabilities are clamped to [1e-7, 1 - 1e-7] so saturated predictions
    stay finite. ``pred`` and ``target_onehot`` are (..., K).
    """
    p, y = _check_class_arrays(pred, target_onehot)
    p = np.clip(p, _CLAMP, 1.0 - _CLAMP)
    per_voxel = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum(axis=1)
    return float(per_voxel.mean() / p.shape[1])


def loss_dice(pred: np.ndarray, target_onehot: np.ndarray) -> float:
    """Soft overlap loss: one minus the mean per-class overlap ratio.

    Per class the ratio is sum(y * p) / (sum(y + p) + eps) with sums over
    voxels; zero for a perfect hard prediction when every class occurs.
    """
    p, y = _check_class_arrays(pred, target_onehot)
    num = (y * p).sum(axis=0)
    den = (y + p).sum(axis=0) + _CLAMP
    k = p.shape[1]
    return float(1.0 - (2.0 / k) * np.sum(num / den))


# ---------------------------------------------------------------------------
# Evaluation metrics


def metric_dice(
    pred: LabeledVolume, truth: LabeledVolume
) -> tuple[dict, float]:
    """Per-class and mean overlap score of two labeled grids.

    Classes absent from both volumes are excluded from the mean instead of
    counting as perfect.
    """
    if pred.dims != truth.dims:
        raise ValueError("label grids must share dimensions")
    a = pred.labels.ravel()
    b = truth.labels.ravel()
    labels = sorted(set(np.unique(a)) | set(np.unique(b)) - {0})
    per_class = {}
    for label in labels:
        if label == 0:
            continue
        pa = a == label
        pb = b == label
        denom = pa.sum() + pb.sum()
        if denom == 0:
            continue
        per_class[int(label)] = float(2.0 * np.logical_and(pa, pb).sum() / denom)
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, mean


def _as_points(obj) -> np.ndarray:
    if isinstance(obj, TriangleMesh):
        return obj.vertices
    return np.asarray(obj, dtype=float).reshape(-1, 3)


def metric_hausdorff(a, b) -> float:
    """Symmetric Hausdorff distance (mm) between point sets or mesh vertices."""
    d_ab, d_ba = point_set_distances(_as_points(a), _as_points(b))
    return float(max(d_ab.max(), d_ba.max()))


def metric_joint_error(keypoints_hat, keypoints_ref) -> float:
    """Mean Euclidean keypoint error in mm."""
    a = _as_points(keypoints_hat)
    b = _as_points(keypoints_ref)
    if a.shape != b.shape:
        raise ValueError("keypoint sets disagree in shape")
    return float(np.linalg.norm(a - b, axis=1).mean())


def metric_joint_squared_error(keypoints_hat, keypoints_ref) -> float:
    """Mean squared keypoint error in mm^2 (the squared companion)."""
    a = _as_points(keypoints_hat)
    b = _as_points(keypoints_ref)
    if a.shape != b.shape:
        raise ValueError("keypoint sets disagree in shape")
    return float((np.linalg.norm(a - b, axis=1) ** 2).mean())


def metric_pck(
    keypoints_hat,
    keypoints_ref,
    max_threshold_mm: float = 50.0,
    samples: int = 100,
) -> tuple[float, EvaluationCurve]:
    """Correct-keypoint curve up to a distance ceiling and its mean (AUC).

    The curve samples the fraction of keypoints within t mm at ``samples``
    uniform thresholds in (0, max]; the area under it is the mean of those
    fractions. The single-threshold fraction is the curve's last value.
    """
    a = _as_points(keypoints_hat)
    b = _as_points(keypoints_ref)
    if a.shape != b.shape:
        raise ValueError("keypoint sets disagree in shape")
    errors = np.linalg.norm(a - b, axis=1)
    thresholds = max_threshold_mm * np.arange(1, samples + 1) / samples
    fractions = np.array([(errors <= t).mean() for t in thresholds])
    auc = float(fractions.mean())
    return auc, EvaluationCurve(thresholds, fractions)


# ---------------------------------------------------------------------------
# Shape-space evaluation


def eval_compactness(basis: ShapeBasis) -> EvaluationCurve:
    """Cumulative explained-variance ratio against component count."""
    if basis.rank == 0:
        raise ValueError("basis has no components")
    var = basis.singular_values**2
    total = var.sum()
    if total <= 0:
        ratios = np.ones(basis.rank)
    else:
        ratios = np.cumsum(var) / total
    return EvaluationCurve(np.arange(1, basis.rank + 1, dtype=float), ratios)


def eval_generalization(
    subject_templates: np.ndarray,
    max_components: int | None = None,
    squared: bool = False,
) -> EvaluationCurve:
    """Leave-one-out reconstruction error against component count.

    Each fold fits a PCA basis on the other subjects, projects the held-out
    subject on the first r components, and records the mean per-vertex
    Euclidean error of the reconstruction (mm; squared errors in mm^2 when
    ``squared``). r = 0 measures distance to the fold mean.
    """
    stacked = np.asarray(subject_templates, dtype=float)
    if stacked.ndim == 3:
        stacked = stacked.reshape(stacked.shape[0], -1)
    m = stacked.shape[0]
    if m < 3:
        raise ValueError("leave-one-out needs at least 3 subjects")
    max_rank = m - 2
    if max_components is not None:
        max_rank = min(max_rank, max_components)
    errors = np.zeros((m, max_rank + 1))
    for fold in range(m):
        held = stacked[fold]
        rest = np.delete(stacked, fold, axis=0)
        out = pca(rest)
        centered = held - out.mean
        for r in range(max_rank + 1):
            comp = out.components[:, :r]
            recon = out.mean + comp @ (comp.T @ centered)
            per_vertex = np.linalg.norm((held - recon).reshape(-1, 3), axis=1)
            if squared:
                per_vertex = per_vertex**2
            errors[fold, r] = per_vertex.mean()
    return EvaluationCurve(
        np.arange(max_rank + 1, dtype=float),
        errors.mean(axis=0),
        errors.std(axis=0),
    )
