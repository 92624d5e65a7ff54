"""Differentiable MANO-style hand layer.

The layer maps shape coefficients (10), a full axis-angle pose (root 3 + 15
articulated joints x 3) and a camera-space root location to 21 joints and a
skinned mesh.  Everything is computed in float64 torch so gradients flow
through rotations, kinematics and skinning.

Joint layout (21): 0 is the wrist, then thumb, index, middle, ring and pinky,
each as [mcp, pip, dip, tip].  Tips carry no rotation of their own.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError, FormatError, InvalidInputError, ShapeError

NUM_JOINTS = 21
NUM_BETAS = 10
NUM_PCA = 15
NUM_ARTICULATED = 15
POSE_DIM = 3 + 3 * NUM_ARTICULATED
PCA_POSE_DIM = 3 + NUM_PCA
ROOT_INDEX = 0
MIN_VERTICES = 42
FORMAT_VERSION = 1

PARENTS = np.array([-1, 0, 1, 2, 3, 0, 5, 6, 7, 0, 9, 10, 11, 0, 13, 14, 15, 0, 17, 18, 19])
ARTICULATED = np.array([1, 2, 3, 5, 6, 7, 9, 10, 11, 13, 14, 15, 17, 18, 19])
FINGERTIPS = np.array([4, 8, 12, 16, 20])

_SMALL_ANGLE = 1e-8
_DTYPE = torch.float64


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == _DTYPE else x.to(_DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _require_finite(t: torch.Tensor, name: str) -> None:
    if not bool(torch.isfinite(t).all()):
        raise InvalidInputError(f"{name} contains non-finite values")


def _skew(v: torch.Tensor) -> torch.Tensor:
    x, y, z = v.unbind(-1)
    o = torch.zeros_like(x)
    return torch.stack([o, -z, y, z, o, -x, -y, x, o], dim=-1).reshape(*v.shape[:-1], 3, 3)


def rodrigues(aa) -> torch.Tensor:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3).

    Below an angle of 1e-8 the sin/cos coefficients are replaced by their
    Taylor expansions so the map and its gradient stay finite at zero.
    """
    aa = as_tensor(aa)
    if aa.shape[-1] != 3:
        raise ShapeError(f"axis-angle must have trailing dimension 3, got {tuple(aa.shape)}")
    _require_finite(aa, "axis-angle")
    angle_sq = (aa * aa).sum(-1)[..., None, None]
    small = angle_sq < _SMALL_ANGLE**2
    safe_sq = torch.where(small, torch.ones_like(angle_sq), angle_sq)
    angle = safe_sq.sqrt()
    a = torch.where(small, 1.0 - angle_sq / 6.0, torch.sin(angle) / angle)
    b = torch.where(small, 0.5 - angle_sq / 24.0, (1.0 - torch.cos(angle)) / safe_sq)
    k = _skew(aa)
    eye = torch.eye(3, dtype=aa.dtype).expand_as(k)
    return eye + a * k + b * (k @ k)


@dataclass(frozen=True, eq=False)
class HandModelSpec:
    template_joints: np.ndarray  # (21, 3)
    kinematic_parents: np.ndarray  # (21,)
    shape_blend_J: np.ndarray  # (21, 3, 10)
    pca_basis: np.ndarray  # (45, 15)
    template_vertices: np.ndarray  # (V, 3)
    skin_weights: np.ndarray  # (V, 21)
    shape_blend_V: np.ndarray  # (V, 3, 10)
    seed: int | None = None

    def __post_init__(self):
        self.validate()

    @property
    def num_vertices(self) -> int:
        return self.template_vertices.shape[0]

    def validate(self) -> None:
        """Raise ConfigurationError unless every structural invariant holds."""
        v = self.template_vertices.shape[0] if self.template_vertices.ndim == 2 else -1
        expected = {
            "template_joints": (NUM_JOINTS, 3),
            "kinematic_parents": (NUM_JOINTS,),
            "shape_blend_J": (NUM_JOINTS, 3, NUM_BETAS),
            "pca_basis": (3 * NUM_ARTICULATED, NUM_PCA),
            "template_vertices": (v, 3),
            "skin_weights": (v, NUM_JOINTS),
            "shape_blend_V": (v, 3, NUM_BETAS),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ConfigurationError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError(f"{name} contains non-finite values")
        if v < MIN_VERTICES:
            raise ConfigurationError(f"need at least {MIN_VERTICES} vertices, got {v}")
        parents = self.kinematic_parents
        if parents[0] != -1:
            raise ConfigurationError("joint 0 must be the root")
        if np.any(parents[1:] >= np.arange(1, NUM_JOINTS)) or np.any(parents[1:] < 0):
            raise ConfigurationError("kinematic tree is not topologically ordered")
        if not np.array_equal(parents, PARENTS):
            raise ConfigurationError("parents do not follow the 21-joint hand layout")
        gram = self.pca_basis.T @ self.pca_basis
        if np.max(np.abs(gram - np.eye(NUM_PCA))) > 1e-10:
            raise ConfigurationError("pca_basis columns are not orthonormal")
        w = self.skin_weights
        if np.any(w < 0) or np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-10:
            raise ConfigurationError("skin_weights rows must be non-negative and sum to 1")

    def __eq__(self, other):
        if not isinstance(other, HandModelSpec):
            return NotImplemented
        return self.seed == other.seed and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in _ARRAY_FIELDS
        )

    __hash__ = None

    @cached_property
    def torch(self) -> dict:
        """Tensor copies of the arrays plus precomputed kinematic levels."""
        out = {n: torch.tensor(getattr(self, n), dtype=_DTYPE) for n in _ARRAY_FIELDS if n != "kinematic_parents"}
        parents = self.kinematic_parents
        depth = np.zeros(NUM_JOINTS, dtype=int)
        for j in range(1, NUM_JOINTS):
            depth[j] = depth[parents[j]] + 1
        order, levels = [0], []
        for d in range(1, depth.max() + 1):
            idx = np.flatnonzero(depth == d)
            pos = [order.index(p) for p in parents[idx]]
            levels.append((torch.as_tensor(idx), torch.as_tensor(pos), torch.as_tensor(parents[idx])))
            order.extend(idx.tolist())
        out["levels"] = levels
        out["inverse_order"] = torch.as_tensor(np.argsort(order))
        rot_index = np.full(NUM_JOINTS, NUM_ARTICULATED + 1)
        rot_index[0] = 0
        rot_index[ARTICULATED] = np.arange(1, NUM_ARTICULATED + 1)
        out["rot_index"] = torch.as_tensor(rot_index)
        return out

    def to_dict(self) -> dict:
        doc = {"format_version": FORMAT_VERSION, "seed": self.seed}
        for n in _ARRAY_FIELDS:
            arr = getattr(self, n)
            doc[n] = {"shape": list(arr.shape), "data": arr.ravel().tolist()}
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "HandModelSpec":
        if doc.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"unsupported hand model format_version {doc.get('format_version')!r}")
        arrays = {}
        for n in _ARRAY_FIELDS:
            entry = doc[n]
            dtype = np.int64 if n == "kinematic_parents" else np.float64
            arrays[n] = np.asarray(entry["data"], dtype=dtype).reshape(entry["shape"])
        return cls(seed=doc.get("seed"), **arrays)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "HandModelSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


_ARRAY_FIELDS = (
    "template_joints",
    "kinematic_parents",
    "shape_blend_J",
    "pca_basis",
    "template_vertices",
    "skin_weights",
    "shape_blend_V",
)


@dataclass
class HandOutput:
    joints: torch.Tensor  # (..., 21, 3)
    vertices: torch.Tensor | None  # (..., V, 3)


def pca_to_full(coeffs, spec: HandModelSpec) -> torch.Tensor:
    coeffs = as_tensor(coeffs)
    if coeffs.shape[-1] != NUM_PCA:
        raise ShapeError(f"expected {NUM_PCA} PCA coefficients, got {coeffs.shape[-1]}")
    return coeffs @ spec.torch["pca_basis"].T


def full_to_pca(joints_aa, spec: HandModelSpec) -> torch.Tensor:
    joints_aa = as_tensor(joints_aa)
    if joints_aa.shape[-1] != 3 * NUM_ARTICULATED:
        raise ShapeError(f"expected {3 * NUM_ARTICULATED} joint rotations, got {joints_aa.shape[-1]}")
    return joints_aa @ spec.torch["pca_basis"]


def expand_pose(pose_pca, spec: HandModelSpec) -> torch.Tensor:
    """(..., 18) root axis-angle + PCA coefficients to the (..., 48) full pose."""
    pose_pca = as_tensor(pose_pca)
    if pose_pca.shape[-1] != PCA_POSE_DIM:
        raise ShapeError(f"expected {PCA_POSE_DIM} PCA pose values, got {pose_pca.shape[-1]}")
    return torch.cat([pose_pca[..., :3], pca_to_full(pose_pca[..., 3:], spec)], dim=-1)


def forward(beta, pose, root, spec: HandModelSpec, with_vertices: bool = True) -> HandOutput:
    """Pose the hand.

    ``beta`` (..., 10), ``pose`` (..., 48) and ``root`` (..., 3) share leading
    batch dimensions.  Joints and vertices come back in camera space with
    joints[..., 0, :] equal to ``root``.
    """
    beta, pose, root = as_tensor(beta), as_tensor(pose), as_tensor(root)
    if beta.shape[-1] != NUM_BETAS or pose.shape[-1] != POSE_DIM or root.shape[-1] != 3:
        raise ShapeError(
            f"bad parameter shapes beta={tuple(beta.shape)} pose={tuple(pose.shape)} root={tuple(root.shape)}"
        )
    for t, name in ((beta, "beta"), (pose, "pose"), (root, "root")):
        _require_finite(t, name)
    batch_shape = torch.broadcast_shapes(beta.shape[:-1], pose.shape[:-1], root.shape[:-1])
    beta = beta.expand(*batch_shape, NUM_BETAS).reshape(-1, NUM_BETAS)
    pose = pose.expand(*batch_shape, POSE_DIM).reshape(-1, POSE_DIM)
    root = root.expand(*batch_shape, 3).reshape(-1, 3)
    n = beta.shape[0]
    t = spec.torch

    rest = t["template_joints"] + torch.einsum("jck,bk->bjc", t["shape_blend_J"], beta)
    local = rodrigues(pose.reshape(n, NUM_ARTICULATED + 1, 3))
    eye = torch.eye(3, dtype=_DTYPE).expand(n, 1, 3, 3)
    local = torch.cat([local, eye], dim=1)[:, t["rot_index"]]

    rot_g = local[:, :1]
    pos_g = rest[:, :1]
    for idx, pos, par in t["levels"]:
        rp = rot_g[:, pos]
        offset = rest[:, idx] - rest[:, par]
        pos_g = torch.cat([pos_g, pos_g[:, pos] + (rp @ offset[..., None])[..., 0]], dim=1)
        rot_g = torch.cat([rot_g, rp @ local[:, idx]], dim=1)
    rot_g = rot_g[:, t["inverse_order"]]
    joints = pos_g[:, t["inverse_order"]]

    shift = root - joints[:, 0]
    vertices = None
    if with_vertices:
        w = t["skin_weights"]
        shaped = t["template_vertices"] + torch.einsum("vck,bk->bvc", t["shape_blend_V"], beta)
        blend_rot = torch.einsum("vi,bimn->bvmn", w, rot_g)
        bone_t = joints - (rot_g @ rest[..., None])[..., 0]
        vertices = (blend_rot @ shaped[..., None])[..., 0] + torch.einsum("vi,bic->bvc", w, bone_t)
        vertices = vertices + shift[:, None]
        vertices = vertices.reshape(*batch_shape, -1, 3)
    joints = (joints - joints[:, :1] + root[:, None]).reshape(*batch_shape, NUM_JOINTS, 3)
    return HandOutput(joints=joints, vertices=vertices)


def make_toy_hand(seed: int = 0, num_vertices: int = 128) -> HandModelSpec:
    """Procedural stand-in for the MANO assets with the same structure.

    Every bone is 3-5 cm long.  Shape coefficients scale bone lengths
    linearly (coefficient 0 is a near-uniform scale mode), vertices are
    capsule samples around bones, and each vertex is skinned to its two
    nearest rest joints with inverse-distance weights.
    """
    if num_vertices < MIN_VERTICES:
        raise ConfigurationError(f"num_vertices must be >= {MIN_VERTICES}, got {num_vertices}")
    rng = np.random.default_rng(seed)

    # thumb, index, middle, ring, pinky; angles measured from +y toward +x
    palm_angle = np.deg2rad([-40.0, -12.0, 0.0, 11.0, 22.0]) + rng.normal(0.0, 0.02, 5)
    finger_bend = np.deg2rad([-15.0, -3.0, 0.0, 3.0, 7.0]) + rng.normal(0.0, 0.02, 5)
    palm_len = np.array([0.036, 0.048, 0.049, 0.046, 0.042])
    seg_len = np.array(
        [[0.040, 0.034, 0.031], [0.042, 0.033, 0.030], [0.045, 0.035, 0.031], [0.042, 0.034, 0.030], [0.036, 0.031, 0.030]]
    )
    palm_len = np.clip(palm_len + rng.normal(0.0, 0.001, 5), 0.03, 0.05)
    seg_len = np.clip(seg_len + rng.normal(0.0, 0.001, seg_len.shape), 0.03, 0.05)

    joints = np.zeros((NUM_JOINTS, 3))
    for f in range(5):
        base = 1 + 4 * f
        d_palm = np.array([np.sin(palm_angle[f]), np.cos(palm_angle[f]), 0.0])
        a = palm_angle[f] + finger_bend[f]
        d_finger = np.array([np.sin(a), np.cos(a), 0.0])
        joints[base] = palm_len[f] * d_palm
        for s in range(3):
            joints[base + s + 1] = joints[base + s] + seg_len[f, s] * d_finger

    # per-bone linear length scale: length_b(beta) = length_b * (1 + scale[b] @ beta)
    bone_scale = rng.normal(0.0, 0.015, (NUM_JOINTS, NUM_BETAS))
    bone_scale[:, 0] += 0.04
    bone_scale[0] = 0.0
    blend_j = np.zeros((NUM_JOINTS, 3, NUM_BETAS))
    for c in range(1, NUM_JOINTS):
        p = PARENTS[c]
        blend_j[c] = blend_j[p] + np.outer(joints[c] - joints[p], bone_scale[c])

    children = np.arange(1, NUM_JOINTS)
    vertices = np.zeros((num_vertices, 3))
    blend_v = np.zeros((num_vertices, 3, NUM_BETAS))
    for k in range(num_vertices):
        c = children[k % len(children)]
        p = PARENTS[c]
        bone = joints[c] - joints[p]
        axis = bone / np.linalg.norm(bone)
        frac = rng.uniform(0.05, 0.95)
        radial = rng.normal(size=3)
        radial -= radial.dot(axis) * axis
        radial *= rng.uniform(0.007, 0.011) / np.linalg.norm(radial)
        vertices[k] = joints[p] + frac * bone + radial
        blend_v[k] = blend_j[p] + frac * (blend_j[c] - blend_j[p])

    dist = np.linalg.norm(vertices[:, None, :] - joints[None, :, :], axis=-1)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :2]
    weights = np.zeros((num_vertices, NUM_JOINTS))
    rows = np.arange(num_vertices)
    d1, d2 = dist[rows, nearest[:, 0]], dist[rows, nearest[:, 1]]
    weights[rows, nearest[:, 0]] = d2 / (d1 + d2)
    weights[rows, nearest[:, 1]] = 1.0 - weights[rows, nearest[:, 0]]

    basis, _ = np.linalg.qr(rng.normal(size=(3 * NUM_ARTICULATED, NUM_PCA)))
    return HandModelSpec(
        template_joints=joints,
        kinematic_parents=PARENTS.copy(),
        shape_blend_J=blend_j,
        pca_basis=basis,
        template_vertices=vertices,
        skin_weights=weights,
        shape_blend_V=blend_v,
        seed=seed,
    )


def bone_lengths(joints) -> torch.Tensor:
    joints = as_tensor(joints)
    return torch.linalg.norm(joints[..., 1:, :] - joints[..., PARENTS[1:], :], dim=-1)
