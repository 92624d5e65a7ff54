"""Pose Alignment: residual networks that carry hand parameters from one
frame to another given the difference of the two frames' features."""
from __future__ import annotations

import torch

from . import hand_model as hm
from .nets import Params, mlp_forward
from .predictor import ROOT_ALIGNER, ROT_ALIGNER, Annotation, FeatureVector


def align_shape(beta_b):
    """Both frames show the same hand, so shape is copied unchanged."""
    return beta_b


def root_displacement(r_b, dz_r, params: Params) -> torch.Tensor:
    r_b, dz_r = hm.as_tensor(r_b), hm.as_tensor(dz_r)
    return mlp_forward(params, ROOT_ALIGNER, torch.cat([r_b, dz_r], dim=-1), residual=True)


def pose_offset(theta_b, dz_theta, params: Params) -> torch.Tensor:
    """Per-component offset in (-1, 1) rad."""
    theta_b, dz_theta = hm.as_tensor(theta_b), hm.as_tensor(dz_theta)
    return torch.tanh(mlp_forward(params, ROT_ALIGNER, torch.cat([theta_b, dz_theta], dim=-1), residual=True))


def align_root(r_b, dz_r, params: Params) -> torch.Tensor:
    r_b = hm.as_tensor(r_b)
    return r_b + root_displacement(r_b, dz_r, params)


def align_pose(theta_b, dz_theta, params: Params) -> torch.Tensor:
    """``theta_b`` must be the full 48-dim pose (expand PCA poses first)."""
    theta_b = hm.as_tensor(theta_b)
    return theta_b + pose_offset(theta_b, dz_theta, params)


def align(src: Annotation, z_src: FeatureVector, z_dst: FeatureVector, params: Params) -> Annotation:
    """Parameters of the destination frame from those of the source frame."""
    return Annotation(
        root=align_root(src.root, z_dst.z_r - z_src.z_r, params),
        pose=align_pose(src.pose, z_dst.z_theta - z_src.z_theta, params),
        beta=align_shape(hm.as_tensor(src.beta)),
    )


def propagate(gt_s: Annotation, z_s: FeatureVector, z_u: FeatureVector, params: Params) -> Annotation:
    """Carry the labelled frame's ground truth to the unlabelled frame."""
    return align(gt_s, z_s, z_u, params)
