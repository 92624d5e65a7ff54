"""Training objectives.

All functions work on batched tensors and return one value per sample;
batch reduction (mean over pairs) happens in the trainer.  Joint losses are
the per-joint squared Euclidean distance averaged over the 21 joints (m^2).
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import torch

from .errors import ConfigurationError, ShapeError


@dataclass(frozen=True)
class LossWeights:
    lambda_j: float = 0.5
    lambda_theta: float = 5e-6
    lambda_beta: float = 5e-7
    lambda_align: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and v < float("inf")):
                raise ConfigurationError(f"{f.name} must be finite and non-negative, got {v}")


LOG_COLUMNS = ("l_j", "l_theta", "l_beta", "l_align_fwd", "l_align_bwd", "l_align_reg", "total")


@dataclass(frozen=True)
class LossBreakdown:
    """Unweighted terms (batch means) and the weighted total."""

    l_j: float
    l_theta: float
    l_beta: float
    l_align_fwd: float
    l_align_bwd: float
    l_align_reg: float
    total: float

    def as_row(self) -> tuple:
        return tuple(getattr(self, c) for c in LOG_COLUMNS)

    def weighted_total(self, w: LossWeights) -> float:
        pred = w.lambda_j * self.l_j + w.lambda_theta * self.l_theta + w.lambda_beta * self.l_beta
        align = w.lambda_j * (self.l_align_fwd + self.l_align_bwd) + w.lambda_theta * self.l_align_reg
        return pred + w.lambda_align * align


def _sq_norm(x: torch.Tensor) -> torch.Tensor:
    return (x * x).sum(-1)


def loss_joints(pred_joints: torch.Tensor, gt_joints: torch.Tensor) -> torch.Tensor:
    if pred_joints.shape != gt_joints.shape:
        raise ShapeError(f"joint shapes differ: {tuple(pred_joints.shape)} vs {tuple(gt_joints.shape)}")
    return _sq_norm(pred_joints - gt_joints).mean(-1)


def loss_pred(reg_joints_s, gt_joints_s, reg_pose_s, reg_beta_s, weights: LossWeights) -> dict:
    """Supervision of the regressor on a labelled frame; ``reg_pose_s`` is the
    expanded 48-dim pose."""
    terms = {
        "l_j": loss_joints(reg_joints_s, gt_joints_s),
        "l_theta": _sq_norm(reg_pose_s),
        "l_beta": _sq_norm(reg_beta_s),
    }
    terms["pred"] = (
        weights.lambda_j * terms["l_j"] + weights.lambda_theta * terms["l_theta"] + weights.lambda_beta * terms["l_beta"]
    )
    return terms


def loss_align(
    gt_joints_s, aligned_joints_s, reg_joints_u, aligned_joints_u, theta_align_s, theta_align_u, weights: LossWeights
) -> dict:
    """Forward term pulls the u->s alignment onto the labelled ground truth;
    backward term ties the s->u alignment and the regressor output on u."""
    terms = {
        "l_align_fwd": loss_joints(aligned_joints_s, gt_joints_s),
        "l_align_bwd": loss_joints(aligned_joints_u, reg_joints_u),
        "l_align_reg": _sq_norm(theta_align_s) + _sq_norm(theta_align_u),
    }
    terms["align"] = (
        weights.lambda_j * (terms["l_align_fwd"] + terms["l_align_bwd"]) + weights.lambda_theta * terms["l_align_reg"]
    )
    return terms


def loss_total(pred_part, align_part, weights: LossWeights):
    """Accepts the dicts above or plain numbers/tensors."""
    pred = pred_part["pred"] if isinstance(pred_part, dict) else pred_part
    align = align_part["align"] if isinstance(align_part, dict) else align_part
    return pred + weights.lambda_align * align


def breakdown(terms: dict, total: torch.Tensor) -> LossBreakdown:
    def mean(name):
        t = terms.get(name)
        return 0.0 if t is None else float(t.detach().mean())

    return LossBreakdown(*(mean(c) for c in LOG_COLUMNS[:-1]), total=float(total.detach()))
