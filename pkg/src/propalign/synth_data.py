"""Sparsely labelled synthetic hand videos.

Each video has a constant shape, a smooth random-walk pose and root
trajectory (articulation walks in the PCA coefficient space, so poses are
reachable by a 15-coefficient regressor), and per-frame keypoint observations: normalized image
coordinates ``(x/z, y/z)`` of the 21 joints plus a visibility flag.
Frame indices are 1-based throughout the public API.
"""
from __future__ import annotations

import bisect
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import hand_model as hm
from .errors import ConfigurationError, FormatError, GenerationError, InvalidInputError
from .predictor import OBS_DIM, Annotation, CameraIntrinsics

DATASET_VERSION = 1
SMOOTHING = 0.9
MAX_JOINT_ANGLE = np.pi / 2
DEPTH_RANGE = (0.3, 0.7)
MAX_ATTEMPTS = 100


@dataclass(frozen=True)
class MotionConfig:
    pose_step_sigma: float = 0.03
    root_step_sigma: float = 0.004
    shape_sigma: float = 1.0
    obs_noise_sigma: float = 0.002
    occlusion_prob: float = 0.05
    frames: int = 97
    seed: int = 0

    def __post_init__(self):
        for name in ("pose_step_sigma", "root_step_sigma", "shape_sigma", "obs_noise_sigma"):
            if not getattr(self, name) >= 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if not 0 <= self.occlusion_prob < 1:
            raise ConfigurationError("occlusion_prob must lie in [0, 1)")
        if self.frames < 2:
            raise ConfigurationError("a video needs at least 2 frames")


@dataclass
class Frame:
    t: int
    observation: np.ndarray
    gt: Annotation
    is_labelled: bool


@dataclass
class Video:
    video_id: int
    obs: np.ndarray  # (T, 63)
    root: np.ndarray  # (T, 3)
    pose: np.ndarray  # (T, 48)
    beta: np.ndarray  # (T, 10)
    labelled: np.ndarray  # (T,) bool

    @property
    def T(self) -> int:
        return self.obs.shape[0]

    @property
    def labelled_indices(self) -> list[int]:
        return (np.flatnonzero(self.labelled) + 1).tolist()

    @property
    def unlabelled_indices(self) -> list[int]:
        return (np.flatnonzero(~self.labelled) + 1).tolist()

    def gt(self, t) -> Annotation:
        i = np.asarray(t) - 1
        return Annotation(self.root[i], self.pose[i], self.beta[i])

    def frame(self, t: int) -> Frame:
        return Frame(t=t, observation=self.obs[t - 1], gt=self.gt(t), is_labelled=bool(self.labelled[t - 1]))

    @property
    def frames(self) -> list[Frame]:
        return [self.frame(t) for t in range(1, self.T + 1)]


@dataclass
class VideoDataset:
    videos: list[Video]
    camera: CameraIntrinsics
    model_seed: int
    K: int
    meta: dict = field(default_factory=dict)

    def counts(self) -> dict:
        return {
            "videos": len(self.videos),
            "frames": int(sum(v.T for v in self.videos)),
            "labelled": int(sum(v.labelled.sum() for v in self.videos)),
        }


def label_schedule(T: int, K: int) -> list[int]:
    """Every K-th frame starting at frame 1, plus the last frame."""
    if K < 1 or K > T:
        raise ConfigurationError(f"label stride K={K} must satisfy 1 <= K <= T={T}")
    s = list(range(1, T + 1, K))
    if s[-1] != T:
        s.append(T)
    return s


def nearest_supervised(u: int, labelled: list[int]) -> int:
    """Closest labelled index to ``u``; ties go to the smaller index."""
    if not labelled:
        raise InvalidInputError("labelled index set is empty")
    i = bisect.bisect_left(labelled, u)
    cands = labelled[max(i - 1, 0) : i + 1]
    return min(cands, key=lambda s: (abs(s - u), s))


def project(joints: np.ndarray) -> np.ndarray:
    """Normalized image coordinates (x/z, y/z) of camera-space points."""
    return joints[..., :2] / joints[..., 2:3]


def _clamped_step(pos: np.ndarray, step: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Advance per-joint axis-angles, stopping on the |aa| <= pi/2 ball.

    Returns the new positions and a velocity whose clamped joints are
    reversed, so the walk bounces off the boundary.
    """
    new = pos + step
    over = np.linalg.norm(new, axis=-1) > MAX_JOINT_ANGLE
    if np.any(over):
        p, s = pos[over], step[over]
        a, b, c = (s * s).sum(-1), 2 * (p * s).sum(-1), (p * p).sum(-1) - MAX_JOINT_ANGLE**2
        kappa = np.clip((-b + np.sqrt(np.maximum(b * b - 4 * a * c, 0.0))) / (2 * a), 0.0, 1.0)
        new[over] = p + kappa[:, None] * s
        step = step.copy()
        step[over] = -s
    return new, step


def _fit_joint_limits(basis: np.ndarray, coeffs: np.ndarray, step: np.ndarray) -> np.ndarray:
    """Largest fraction of ``step`` (bisection) keeping every articulated
    joint of ``basis @ coeffs`` inside the |aa| <= pi/2 ball."""

    def ok(c):
        return np.all(np.linalg.norm((basis @ c).reshape(-1, 3), axis=1) <= MAX_JOINT_ANGLE)

    if ok(coeffs + step):
        return coeffs + step
    lo, hi = 0.0, 1.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if ok(coeffs + mid * step) else (lo, mid)
    return coeffs + lo * step


def _smoothed(v: np.ndarray, rng: np.random.Generator, sigma: float) -> np.ndarray:
    eps = rng.normal(0.0, sigma, v.shape)
    return np.clip(SMOOTHING * v + np.sqrt(1 - SMOOTHING**2) * eps, -3 * sigma, 3 * sigma)


def _in_frustum(root: np.ndarray, camera: CameraIntrinsics) -> bool:
    lim_x, lim_y = 0.6 * camera.cx / camera.fx, 0.6 * camera.cy / camera.fy
    z = root[2]
    return DEPTH_RANGE[0] <= z <= DEPTH_RANGE[1] and abs(root[0] / z) <= lim_x and abs(root[1] / z) <= lim_y


def generate_video(cfg: MotionConfig, spec: hm.HandModelSpec, camera: CameraIntrinsics, video_id: int = 0, K: int | None = None) -> Video:
    """Deterministic in ``cfg.seed``.  Without ``K`` every frame is labelled."""
    rng = np.random.default_rng(cfg.seed)
    T = cfg.frames
    beta = rng.normal(size=hm.NUM_BETAS) * cfg.shape_sigma

    basis = spec.pca_basis
    pca_sigma = cfg.pose_step_sigma * np.sqrt(basis.shape[0] / basis.shape[1])
    coeffs = _fit_joint_limits(basis, np.zeros(hm.NUM_PCA), rng.normal(0.0, 0.3, hm.NUM_PCA))
    vel_pca = np.zeros(hm.NUM_PCA)
    root_aa, _ = _clamped_step(np.zeros((1, 3)), rng.normal(0.0, 0.3, (1, 3)))
    vel_aa = np.zeros((1, 3))
    root = np.array([0.0, 0.0, rng.uniform(0.35, 0.65)])
    root[:2] = rng.uniform(-0.1, 0.1, 2) * root[2]
    vel_root = np.zeros(3)

    def full_pose():
        return np.concatenate([root_aa[0], basis @ coeffs])

    poses, roots = [full_pose()], [root]
    for _ in range(T - 1):
        vel_pca = SMOOTHING * vel_pca + np.sqrt(1 - SMOOTHING**2) * rng.normal(0.0, pca_sigma, hm.NUM_PCA)
        step = basis @ vel_pca
        peak = np.max(np.abs(step))
        if peak > 3 * cfg.pose_step_sigma:
            vel_pca = vel_pca * (3 * cfg.pose_step_sigma / peak)
        new = _fit_joint_limits(basis, coeffs, vel_pca)
        if not np.array_equal(new, coeffs + vel_pca):
            vel_pca = -vel_pca
        coeffs = new
        vel_aa = _smoothed(vel_aa, rng, cfg.pose_step_sigma)
        root_aa, vel_aa = _clamped_step(root_aa, vel_aa)
        for attempt in range(MAX_ATTEMPTS):
            if attempt == 0:
                cand_vel = _smoothed(vel_root, rng, cfg.root_step_sigma)
            else:
                cand_vel = np.clip(rng.normal(0.0, cfg.root_step_sigma, 3), -3 * cfg.root_step_sigma, 3 * cfg.root_step_sigma)
            if _in_frustum(root + cand_vel, camera):
                break
        else:
            raise GenerationError(f"root trajectory left the camera frustum after {MAX_ATTEMPTS} attempts")
        vel_root = cand_vel
        root = root + vel_root
        poses.append(full_pose())
        roots.append(root)

    pose = np.stack(poses)
    roots = np.stack(roots)
    betas = np.tile(beta, (T, 1))
    joints = hm.forward(betas, pose, roots, spec, with_vertices=False).joints.numpy()

    uv = project(joints) + rng.normal(0.0, cfg.obs_noise_sigma, (T, hm.NUM_JOINTS, 2))
    visible = rng.random((T, hm.NUM_JOINTS)) >= cfg.occlusion_prob
    obs = np.concatenate([uv * visible[..., None], visible[..., None].astype(np.float64)], axis=-1).reshape(T, OBS_DIM)

    labelled = np.ones(T, dtype=bool)
    if K is not None:
        labelled[:] = False
        labelled[np.asarray(label_schedule(T, K)) - 1] = True
    return Video(video_id=video_id, obs=obs, root=roots, pose=pose, beta=betas, labelled=labelled)


_SPLIT_CODES = {"train": 0, "test": 1}


def video_seed(seed: int, split: str, index: int) -> int:
    return int(np.random.SeedSequence([seed, _SPLIT_CODES.get(split, 2), index]).generate_state(1)[0])


def generate_dataset(
    n_videos: int,
    K: int,
    spec: hm.HandModelSpec,
    camera: CameraIntrinsics | None = None,
    motion: MotionConfig | None = None,
    seed: int = 0,
    split: str = "train",
) -> VideoDataset:
    camera = camera or CameraIntrinsics()
    motion = motion or MotionConfig()
    label_schedule(motion.frames, K)
    videos = [
        generate_video(replace(motion, seed=video_seed(seed, split, i)), spec, camera, video_id=i, K=K)
        for i in range(n_videos)
    ]
    meta = {"split": split, "seed": seed, "motion": asdict(motion)}
    return VideoDataset(videos=videos, camera=camera, model_seed=spec.seed, K=K, meta=meta)


def save_dataset(ds: VideoDataset, path) -> None:
    header = {
        "format_version": DATASET_VERSION,
        "camera": asdict(ds.camera),
        "model_seed": ds.model_seed,
        "K": ds.K,
        "counts": ds.counts(),
        "meta": ds.meta,
    }
    with open(Path(path), "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for v in ds.videos:
            for i in range(v.T):
                rec = {
                    "video_id": v.video_id,
                    "t": i + 1,
                    "is_labelled": bool(v.labelled[i]),
                    "obs": v.obs[i].tolist(),
                    "gt": {"root": v.root[i].tolist(), "pose": v.pose[i].tolist(), "beta": v.beta[i].tolist()},
                }
                fh.write(json.dumps(rec) + "\n")


def load_dataset(path) -> VideoDataset:
    with open(Path(path)) as fh:
        header = json.loads(fh.readline())
        if header.get("format_version") != DATASET_VERSION:
            raise FormatError(f"unsupported dataset format_version {header.get('format_version')!r}")
        rows: dict[int, list] = {}
        for line in fh:
            rec = json.loads(line)
            rows.setdefault(rec["video_id"], []).append(rec)
    videos = []
    for vid, recs in rows.items():
        if [r["t"] for r in recs] != list(range(1, len(recs) + 1)):
            raise FormatError(f"video {vid}: frames are not consecutive from t=1")
        videos.append(
            Video(
                video_id=vid,
                obs=np.array([r["obs"] for r in recs], dtype=np.float64).reshape(len(recs), OBS_DIM),
                root=np.array([r["gt"]["root"] for r in recs], dtype=np.float64).reshape(-1, 3),
                pose=np.array([r["gt"]["pose"] for r in recs], dtype=np.float64).reshape(-1, hm.POSE_DIM),
                beta=np.array([r["gt"]["beta"] for r in recs], dtype=np.float64).reshape(-1, hm.NUM_BETAS),
                labelled=np.array([r["is_labelled"] for r in recs], dtype=bool),
            )
        )
    ds = VideoDataset(
        videos=videos,
        camera=CameraIntrinsics(**header["camera"]),
        model_seed=header["model_seed"],
        K=header["K"],
        meta=header.get("meta", {}),
    )
    if ds.counts() != header["counts"]:
        raise FormatError(f"header counts {header['counts']} do not match the file ({ds.counts()})")
    return ds


def rotate_about_camera_axis(obs: np.ndarray, ann: Annotation, angle: float) -> tuple[np.ndarray, Annotation]:
    """Rotate observations and ground truth together about the optical axis.

    Projection commutes with this rotation, so the rotated observation is
    exactly the observation of the rotated hand (noise rotates with it).
    """
    c, s = np.cos(angle), np.sin(angle)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    o = obs.reshape(*obs.shape[:-1], hm.NUM_JOINTS, 3).copy()
    o[..., :2] = o[..., :2] @ rz[:2, :2].T
    root = ann.root @ rz.T
    root_aa = (Rotation.from_matrix(rz) * Rotation.from_rotvec(ann.pose[..., :3])).as_rotvec()
    pose = np.concatenate([root_aa, ann.pose[..., 3:]], axis=-1)
    return o.reshape(obs.shape), Annotation(root, pose, ann.beta)
