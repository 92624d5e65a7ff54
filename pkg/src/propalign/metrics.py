"""Pose and mesh error metrics with root-translation, Procrustes and
scaled-depth alignment, plus the thresholded F-score.

Inputs are point sets in meters; every error metric reports millimeters.
Frame-level reports are averaged with ``np.mean`` (pairwise summation), so
aggregates do not depend on how frames were grouped before the reduction.
"""
from __future__ import annotations

import csv
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DegenerateInputError, InvalidInputError, ShapeError
from .hand_model import ROOT_INDEX, HandModelSpec, forward

M_TO_MM = 1000.0
TABLE_COLUMNS = ("F@5", "F@15", "MPVPE", "MPVPE(P)", "MPJPE", "MPJPE(T)", "MPJPE(SD)", "MPJPE(P)")
CSV_HEADER = ("split", "scenario", "model") + TABLE_COLUMNS


def _points(x, name="points") -> np.ndarray:
    arr = np.asarray(x.detach() if hasattr(x, "detach") else x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] < 1:
        raise ShapeError(f"{name} must be an (N, 3) array with N >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def _pair(pred, gt):
    pred, gt = _points(pred, "pred"), _points(gt, "gt")
    if pred.shape != gt.shape:
        raise ShapeError(f"point count mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def mpjpe(pred, gt) -> float:
    """Mean Euclidean distance between corresponding points, in mm."""
    pred, gt = _pair(pred, gt)
    return float(np.mean(np.linalg.norm(pred - gt, axis=1)) * M_TO_MM)


# the same formula serves vertices
mpvpe = mpjpe


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation


def align_translation(pred, gt, root_index: int = ROOT_INDEX) -> np.ndarray:
    pred, gt = _pair(pred, gt)
    if not -pred.shape[0] <= root_index < pred.shape[0]:
        raise IndexError(f"root_index {root_index} out of range for {pred.shape[0]} points")
    return pred + (gt[root_index] - pred[root_index])


def align_centroid(pred, gt) -> np.ndarray:
    pred, gt = _pair(pred, gt)
    return pred - pred.mean(axis=0) + gt.mean(axis=0)


def align_procrustes(pred, gt) -> tuple[np.ndarray, SimilarityTransform]:
    """Least-squares similarity alignment of ``pred`` onto ``gt`` (Umeyama)."""
    pred, gt = _pair(pred, gt)
    if pred.shape[0] < 3:
        raise DegenerateInputError("Procrustes alignment needs at least 3 points")
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    xp, xg = pred - mu_p, gt - mu_g
    cov = xg.T @ xp / pred.shape[0]
    u, sv, vt = np.linalg.svd(cov)
    if sv[0] <= 0.0 or sv[1] <= 1e-12 * sv[0]:
        raise DegenerateInputError("cross-covariance has rank < 2; rotation is not determined")
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2] = -1.0
    rotation = u @ np.diag(d) @ vt
    var_p = np.sum(xp**2) / pred.shape[0]
    scale = float(np.sum(sv * d) / var_p)
    translation = mu_g - scale * rotation @ mu_p
    tf = SimilarityTransform(scale=scale, rotation=rotation, translation=translation)
    return tf.apply(pred), tf


def align_scaled_depth(pred, gt) -> np.ndarray:
    """Match overall scale and mean depth only.

    ``pred`` is scaled about its own centroid by the ratio of summed
    centroid distances, then shifted along z so the mean depths agree.
    Rotation and the x-y position are left as predicted.
    """
    pred, gt = _pair(pred, gt)
    c_pred, c_gt = pred.mean(axis=0), gt.mean(axis=0)
    spread = np.sum(np.linalg.norm(pred - c_pred, axis=1))
    if spread <= 0.0:
        raise DegenerateInputError("predicted points are all coincident")
    scale = np.sum(np.linalg.norm(gt - c_gt, axis=1)) / spread
    out = scale * (pred - c_pred) + c_pred
    out[:, 2] += gt[:, 2].mean() - out[:, 2].mean()
    return out


def f_score(pred, gt, tau_mm: float) -> float:
    """Harmonic mean of nearest-neighbour precision and recall at ``tau_mm``."""
    pred, gt = _points(pred, "pred"), _points(gt, "gt")
    if tau_mm <= 0:
        raise InvalidInputError("tau must be positive")
    d = cdist(pred, gt) * M_TO_MM
    precision = float(np.mean(d.min(axis=1) <= tau_mm))
    recall = float(np.mean(d.min(axis=0) <= tau_mm))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class MetricReport:
    f5: float
    f15: float
    mpvpe: float
    mpvpe_p: float
    mpjpe: float
    mpjpe_t: float
    mpjpe_sd: float
    mpjpe_p: float

    def as_row(self) -> tuple:
        return astuple(self)

    @classmethod
    def mean(cls, reports) -> "MetricReport":
        arr = np.array([r.as_row() for r in reports], dtype=np.float64)
        if arr.size == 0:
            raise InvalidInputError("cannot average an empty list of reports")
        return cls(*(float(v) for v in arr.mean(axis=0)))


def evaluate_points(pred_joints, gt_joints, pred_vertices, gt_vertices) -> MetricReport:
    pj, gj = _pair(pred_joints, gt_joints)
    pv, gv = _pair(pred_vertices, gt_vertices)
    pv_p, _ = align_procrustes(pv, gv)
    return MetricReport(
        f5=f_score(pv_p, gv, 5.0),
        f15=f_score(pv_p, gv, 15.0),
        mpvpe=mpvpe(pv, gv),
        mpvpe_p=mpvpe(pv_p, gv),
        mpjpe=mpjpe(pj, gj),
        mpjpe_t=mpjpe(align_translation(pj, gj), gj),
        mpjpe_sd=mpjpe(align_scaled_depth(pj, gj), gj),
        mpjpe_p=mpjpe(align_procrustes(pj, gj)[0], gj),
    )


def evaluate_frame(pred_annotation, gt_annotation, spec: HandModelSpec) -> MetricReport:
    """Pose both annotations with the hand layer and score the prediction."""
    pred = forward(pred_annotation.beta, pred_annotation.pose, pred_annotation.root, spec)
    gt = forward(gt_annotation.beta, gt_annotation.pose, gt_annotation.root, spec)
    return evaluate_points(
        pred.joints.detach().numpy(),
        gt.joints.detach().numpy(),
        pred.vertices.detach().numpy(),
        gt.vertices.detach().numpy(),
    )


def write_report_csv(path, rows) -> None:
    """``rows`` are (split, scenario, model, MetricReport) tuples."""
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for split, scenario, model, report in rows:
            writer.writerow([split, scenario, model, *(repr(v) for v in report.as_row())])


def read_report_csv(path) -> list[tuple]:
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ShapeError(f"unexpected report header {header}")
        return [(r[0], r[1], r[2], MetricReport(*map(float, r[3:]))) for r in reader]


REPORT_FIELDS = tuple(f.name for f in fields(MetricReport))
