"""Single-frame hand predictor.

A keypoint-observation encoder produces split features ``[z_r; z_theta]``;
a root branch regresses depth/translation parameters from ``z_r`` and a
pose/shape branch regresses root rotation, 15 PCA coefficients and 10
shape coefficients from ``z_theta``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import hand_model as hm
from .errors import ConfigurationError, FormatError, InvalidInputError, OutOfFrustumError
from .nets import Params, init_mlp, layer_sizes, mlp_forward

OBS_DIM = 3 * hm.NUM_JOINTS
FEATURE_DIM = 64
ENCODER_HIDDEN = (128, 128)
ROOT_ALIGNER_HIDDEN = 128
ROT_ALIGNER_HIDDEN = 512
# Fixed output gains of the root branch for (d_f, t_u, t_v).  Depth offsets
# are ~1e-4 in focal-normalized units and translations ~1e2 pixels; the
# gains keep the trainable values of order one.
ROOT_GAIN = (1e-4, 100.0, 100.0)
CHECKPOINT_VERSION = 1

ENCODER = "predictor.encoder"
ROOT_HEAD = "predictor.root_head"
POSE_HEAD = "predictor.pose_head"
ROOT_ALIGNER = "aligner.root"
ROT_ALIGNER = "aligner.rot"
NETWORKS = (ENCODER, ROOT_HEAD, POSE_HEAD, ROOT_ALIGNER, ROT_ALIGNER)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 128.0
    cy: float = 128.0
    d_off: float = 0.4

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError("focal lengths must be positive")
        if not self.d_off > 0:
            raise ConfigurationError("d_off must be positive")


@dataclass
class Annotation:
    """Hand parameters: camera-space root (3), full pose (48), shape (10)."""

    root: object
    pose: object
    beta: object

    def validate(self) -> None:
        for name, size in (("root", 3), ("pose", hm.POSE_DIM), ("beta", hm.NUM_BETAS)):
            arr = self.numpy_field(name)
            if arr.shape[-1] != size:
                raise InvalidInputError(f"annotation {name} must have trailing size {size}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"annotation {name} contains non-finite values")

    def numpy_field(self, name: str) -> np.ndarray:
        v = getattr(self, name)
        return v.detach().numpy() if isinstance(v, torch.Tensor) else np.asarray(v, dtype=np.float64)

    def numpy(self) -> "Annotation":
        return Annotation(*(self.numpy_field(n) for n in ("root", "pose", "beta")))

    def to_dict(self) -> dict:
        return {n: self.numpy_field(n).tolist() for n in ("root", "pose", "beta")}

    @classmethod
    def from_dict(cls, doc: dict) -> "Annotation":
        return cls(*(np.asarray(doc[n], dtype=np.float64) for n in ("root", "pose", "beta")))

    def __getitem__(self, idx) -> "Annotation":
        return Annotation(self.root[idx], self.pose[idx], self.beta[idx])


@dataclass
class FeatureVector:
    z_r: torch.Tensor
    z_theta: torch.Tensor


def init_params(seed: int = 0, d: int = FEATURE_DIM) -> Params:
    """Predictor and aligner parameters; aligner heads start at zero."""
    rng = np.random.default_rng(seed)
    params = {}
    params.update(init_mlp(rng, ENCODER, (OBS_DIM, *ENCODER_HIDDEN, 2 * d)))
    params.update(init_mlp(rng, ROOT_HEAD, (d, 3)))
    params.update(init_mlp(rng, POSE_HEAD, (d, hm.PCA_POSE_DIM + hm.NUM_BETAS)))
    params.update(
        init_mlp(rng, ROOT_ALIGNER, (3 + d, ROOT_ALIGNER_HIDDEN, ROOT_ALIGNER_HIDDEN, 3), zero_head=True)
    )
    params.update(
        init_mlp(rng, ROT_ALIGNER, (hm.POSE_DIM + d, ROT_ALIGNER_HIDDEN, ROT_ALIGNER_HIDDEN, hm.POSE_DIM), zero_head=True)
    )
    return params


def feature_dim(params: Params) -> int:
    return params[f"{ROOT_HEAD}.0.weight"].shape[0]


def validate_params(params: Params) -> int:
    """Check that all five networks chain together; returns the feature size."""
    sizes = {net: layer_sizes(params, net) for net in NETWORKS}
    d = sizes[ROOT_HEAD][0]
    expected = {
        ENCODER: (OBS_DIM, 2 * d),
        ROOT_HEAD: (d, 3),
        POSE_HEAD: (d, hm.PCA_POSE_DIM + hm.NUM_BETAS),
        ROOT_ALIGNER: (3 + d, 3),
        ROT_ALIGNER: (hm.POSE_DIM + d, hm.POSE_DIM),
    }
    for net, (n_in, n_out) in expected.items():
        if sizes[net][0] != n_in or sizes[net][-1] != n_out:
            raise ConfigurationError(f"{net} maps {sizes[net][0]}->{sizes[net][-1]}, expected {n_in}->{n_out}")
    for net in (ROOT_ALIGNER, ROT_ALIGNER):
        if len(sizes[net]) != 4 or sizes[net][1] != sizes[net][2]:
            raise ConfigurationError(f"{net} must have two equal-width hidden layers, got {sizes[net]}")
    for name, t in params.items():
        if not bool(torch.isfinite(t).all()):
            raise ConfigurationError(f"parameter {name} is not finite")
    return d


def encode(obs, params: Params) -> FeatureVector:
    obs = hm.as_tensor(obs)
    z = mlp_forward(params, ENCODER, obs)
    d = z.shape[-1] // 2
    return FeatureVector(z_r=z[..., :d], z_theta=z[..., d:])


def regress_root_params(z_r, params: Params, gain=ROOT_GAIN) -> torch.Tensor:
    """Columns are (d_f, t_u, t_v)."""
    z_r = hm.as_tensor(z_r)
    return mlp_forward(params, ROOT_HEAD, z_r) * torch.tensor(gain, dtype=torch.float64)


def unproject_root(rp, camera: CameraIntrinsics) -> torch.Tensor:
    rp = hm.as_tensor(rp)
    d_f, t_u, t_v = rp.unbind(-1)
    d_z = d_f * camera.fx + camera.d_off
    if not bool((d_z > 0).all()):
        raise OutOfFrustumError(f"non-positive root depth {float(d_z.min()):.4g} m")
    return torch.stack([t_u * d_z / camera.fx, t_v * d_z / camera.fy, d_z], dim=-1)


def regress_pose_shape(z_theta, params: Params) -> tuple[torch.Tensor, torch.Tensor]:
    out = mlp_forward(params, POSE_HEAD, hm.as_tensor(z_theta))
    return out[..., : hm.PCA_POSE_DIM], out[..., hm.PCA_POSE_DIM :]


def regress(features: FeatureVector, camera: CameraIntrinsics, params: Params, spec: hm.HandModelSpec) -> Annotation:
    root = unproject_root(regress_root_params(features.z_r, params), camera)
    pose_pca, beta = regress_pose_shape(features.z_theta, params)
    return Annotation(root=root, pose=hm.expand_pose(pose_pca, spec), beta=beta)


def predict(obs, camera: CameraIntrinsics, params: Params, spec: hm.HandModelSpec, with_vertices: bool = True):
    """Observation(s) to (Annotation with full pose, features, posed hand)."""
    features = encode(obs, params)
    ann = regress(features, camera, params, spec)
    out = hm.forward(ann.beta, ann.pose, ann.root, spec, with_vertices=with_vertices)
    return ann, features, out


def save_checkpoint(path, params: Params, camera: CameraIntrinsics, model_seed, **meta) -> None:
    d = validate_params(params)
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "d": d,
        "layer_sizes": {net: layer_sizes(params, net) for net in NETWORKS},
        "camera": asdict(camera),
        "model_seed": model_seed,
        "params": {
            name: {"shape": list(t.shape), "data": t.detach().reshape(-1).tolist()} for name, t in params.items()
        },
    }
    doc.update(meta)
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[Params, dict]:
    """Returns (params, document-without-params); every dimension is checked."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    params = {}
    for name, entry in doc.pop("params").items():
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != int(np.prod(entry["shape"])):
            raise FormatError(f"parameter {name}: {data.size} values for shape {entry['shape']}")
        params[name] = torch.tensor(data.reshape(entry["shape"]))
    try:
        d = validate_params(params)
    except (ConfigurationError, KeyError) as exc:
        raise FormatError(f"checkpoint {path}: {exc}") from exc
    if d != doc["d"] or {net: layer_sizes(params, net) for net in NETWORKS} != doc["layer_sizes"]:
        raise FormatError(f"checkpoint {path}: recorded dimensions do not match the stored arrays")
    doc["camera"] = CameraIntrinsics(**doc["camera"])
    return params, doc
