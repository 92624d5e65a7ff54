"""Three-stage training.

Stage 1 fits the single-frame predictor on labelled frames, stage 2 fits
only the aligner on labelled-labelled pairs, stage 3 trains everything on
pairs of a labelled frame and a nearby (labelled or unlabelled) partner.
Runs are single-threaded and deterministic for a fixed seed.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import hand_model as hm
from .aligner import align
from .errors import ConfigurationError, NonFiniteError, SamplingError, ShapeError
from .losses import LossBreakdown, LossWeights, breakdown, loss_align, loss_pred, loss_total
from .nets import Params
from .predictor import ROOT_ALIGNER, ROT_ALIGNER, Annotation, CameraIntrinsics, encode, regress
from .synth_data import Video, VideoDataset, rotate_about_camera_axis

STAGES = (1, 2, 3)


BACKWARD_SOURCES = ("regressor", "gt")


@dataclass(frozen=True)
class TrainingConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 5e-5
    batch_size: int = 64
    n1: int = 2000
    n2: int = 1000
    n3: int = 2000
    unlabelled_partner_prob: float = 0.5
    max_gap: int | None = None  # None: K // 2 below K = 128, else 64
    top_k_labelled: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    rotation_augment: float = 0.0  # max |angle| about the optical axis; 0 disables
    checkpoint_every: int = 500
    backward_source: str = "gt"  # s->u alignment input: "gt" of s or "regressor" output on s

    def __post_init__(self):
        if not self.learning_rate > 0 or self.batch_size < 1 or self.top_k_labelled < 1:
            raise ConfigurationError("learning rate, batch size and top_k_labelled must be positive")
        if min(self.n1, self.n2, self.n3) < 0:
            raise ConfigurationError("iteration counts must be non-negative")
        if not 0.0 <= self.unlabelled_partner_prob <= 1.0:
            raise ConfigurationError("unlabelled_partner_prob must lie in [0, 1]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigurationError("invalid Adam hyperparameters")
        if self.backward_source not in BACKWARD_SOURCES:
            raise ConfigurationError(f"backward_source must be one of {BACKWARD_SOURCES}")
        if self.max_gap is not None and self.max_gap < 1:
            raise ConfigurationError("max_gap must be >= 1")

    @classmethod
    def desk(cls, **overrides) -> "TrainingConfig":
        """CPU-scale defaults: batch 16 and a larger step size."""
        return cls(**{"batch_size": 16, "learning_rate": 1e-3, **overrides})

    def gap_for(self, K: int) -> int:
        if self.max_gap is not None:
            return self.max_gap
        return max(K // 2, 1) if K < 128 else 64

    def iterations(self, stage: int) -> int:
        return {1: self.n1, 2: self.n2, 3: self.n3}[stage]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainingConfig":
        doc = dict(doc)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown training config keys: {sorted(unknown)}")
        if "weights" in doc:
            doc["weights"] = LossWeights(**doc["weights"])
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "TrainingConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------- sampling


def top_k_nearest(s: int, labelled: list[int], k: int) -> list[int]:
    return sorted(labelled, key=lambda x: (abs(x - s), x))[:k]


def sample_pair(video: Video, labelled: list[int], rng: np.random.Generator, cfg: TrainingConfig, K: int, unlabelled_prob: float | None = None):
    """Returns (s, u, partner_is_labelled), all frame indices 1-based."""
    if not labelled:
        raise SamplingError(f"video {video.video_id} has no labelled frames")
    p = cfg.unlabelled_partner_prob if unlabelled_prob is None else unlabelled_prob
    gap = cfg.gap_for(K)
    mask = video.labelled
    for _ in range(100):
        s = labelled[rng.integers(len(labelled))]
        if rng.random() < p:
            lo, hi = max(1, s - gap + 1), min(video.T, s + gap - 1)
            cands = [u for u in range(lo, hi + 1) if not mask[u - 1]]
            if not cands:
                continue
            return s, cands[rng.integers(len(cands))], False
        near = top_k_nearest(s, labelled, cfg.top_k_labelled)
        return s, near[rng.integers(len(near))], True
    raise SamplingError(f"video {video.video_id}: no valid pair found in 100 attempts")


@dataclass
class PairBatch:
    obs_s: torch.Tensor
    obs_u: torch.Tensor
    gt_s: Annotation  # tensors (B, ...)
    gt_joints_s: torch.Tensor
    ids: list  # (video_id, s, u)


class TrainData:
    """Training videos with labelled ground-truth joints precomputed."""

    def __init__(self, dataset: VideoDataset, spec: hm.HandModelSpec):
        self.dataset = dataset
        self.spec = spec
        self.camera = dataset.camera
        self.videos = dataset.videos
        self.labelled = [v.labelled_indices for v in self.videos]
        self.pool = [(i, t) for i, lab in enumerate(self.labelled) for t in lab]
        if not self.pool:
            raise SamplingError("dataset has no labelled frames")

    def make_batch(self, items, rng: np.random.Generator | None = None, rotation: float = 0.0) -> PairBatch:
        """``items`` are (video index, s, u) triples."""
        obs_s, obs_u, roots, poses, betas = [], [], [], [], []
        for vi, s, u in items:
            v = self.videos[vi]
            os_, gs = v.obs[s - 1], v.gt(s)
            ou = v.obs[u - 1]
            if rotation > 0 and rng is not None:
                angle = rng.uniform(-rotation, rotation)
                os_, gs = rotate_about_camera_axis(os_, gs, angle)
                ou, _ = rotate_about_camera_axis(ou, v.gt(u), angle)
            obs_s.append(os_)
            obs_u.append(ou)
            roots.append(gs.root)
            poses.append(gs.pose)
            betas.append(gs.beta)
        gt = Annotation(*(torch.tensor(np.stack(a)) for a in (roots, poses, betas)))
        with torch.no_grad():
            gt_joints = hm.forward(gt.beta, gt.pose, gt.root, self.spec, with_vertices=False).joints
        ids = [(self.videos[vi].video_id, s, u) for vi, s, u in items]
        return PairBatch(torch.tensor(np.stack(obs_s)), torch.tensor(np.stack(obs_u)), gt, gt_joints, ids)

    def sample_labelled(self, rng, n) -> list:
        picks = rng.integers(len(self.pool), size=n)
        return [(self.pool[i][0], self.pool[i][1], self.pool[i][1]) for i in picks]

    def sample_pairs(self, rng, n, cfg: TrainingConfig, unlabelled_prob=None) -> list:
        out = []
        for _ in range(n):
            vi = int(rng.integers(len(self.videos)))
            s, u, _ = sample_pair(self.videos[vi], self.labelled[vi], rng, cfg, self.dataset.K, unlabelled_prob)
            out.append((vi, s, u))
        return out


# ----------------------------------------------------------------------- losses


def _joints(ann: Annotation, spec) -> torch.Tensor:
    return hm.forward(ann.beta, ann.pose, ann.root, spec, with_vertices=False).joints


def pred_terms(params, batch: PairBatch, spec, camera, weights: LossWeights) -> dict:
    feats = encode(batch.obs_s, params)
    reg = regress(feats, camera, params, spec)
    return loss_pred(_joints(reg, spec), batch.gt_joints_s, reg.pose, reg.beta, weights)


def pair_terms(params, batch: PairBatch, spec, camera, weights: LossWeights, backward_source: str = "gt") -> dict:
    """Predictor and alignment terms for (labelled s, partner u) pairs.

    The u->s alignment starts from the regressor output on u and is
    compared with the ground truth of s.  The s->u alignment starts from
    the ground truth of s (or the regressor output on s with
    ``backward_source="regressor"``) and is compared with the regressor
    output on u.
    """
    n = batch.obs_s.shape[0]
    feats = encode(torch.cat([batch.obs_s, batch.obs_u]), params)
    reg = regress(feats, camera, params, spec)
    reg_joints = _joints(reg, spec)
    z_s = type(feats)(feats.z_r[:n], feats.z_theta[:n])
    z_u = type(feats)(feats.z_r[n:], feats.z_theta[n:])
    aligned_s = align(reg[n:], z_u, z_s, params)
    src_s = batch.gt_s if backward_source == "gt" else reg[:n]
    aligned_u = align(src_s, z_s, z_u, params)
    both = Annotation(*(torch.cat([getattr(aligned_s, f), getattr(aligned_u, f)]) for f in ("root", "pose", "beta")))
    aligned_joints = _joints(both, spec)
    terms = loss_pred(reg_joints[:n], batch.gt_joints_s, reg.pose[:n], reg.beta[:n], weights)
    terms.update(
        loss_align(
            batch.gt_joints_s, aligned_joints[:n], reg_joints[n:], aligned_joints[n:], aligned_s.pose, aligned_u.pose, weights
        )
    )
    return terms


def stage_loss(stage: int, params, batch: PairBatch, spec, camera, weights: LossWeights, backward_source: str = "gt"):
    """Returns (scalar batch loss, per-sample terms)."""
    if stage == 1:
        terms = pred_terms(params, batch, spec, camera, weights)
        return terms["pred"].mean(), terms
    terms = pair_terms(params, batch, spec, camera, weights, backward_source)
    if stage == 2:
        return terms["align"].mean(), terms
    return loss_total(terms, terms, weights).mean(), terms


def trainable(stage: int, params: Params) -> list[str]:
    is_aligner = lambda n: n.startswith((ROOT_ALIGNER, ROT_ALIGNER))  # noqa: E731
    if stage == 1:
        return [n for n in params if not is_aligner(n)]
    if stage == 2:
        return [n for n in params if is_aligner(n)]
    return list(params)


# -------------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: Params, grads: dict, state: OptimizerState, cfg: TrainingConfig):
    """One bias-corrected Adam update of the tensors named in ``grads``.

    Updates ``params`` in place and returns (params, state).
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(params[name].shape)}")
        if not bool(torch.isfinite(g).all()):
            bad = int((~torch.isfinite(g)).sum())
            raise NonFiniteError(f"gradient of {name} has {bad} non-finite entries")
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - cfg.beta1**t, 1.0 - cfg.beta2**t
    with torch.no_grad():
        for name, g in grads.items():
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(g)
                state.v[name] = torch.zeros_like(g)
            v = state.v[name]
            m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
            params[name].sub_(cfg.learning_rate * (m / c1) / ((v / c2).sqrt() + cfg.eps))
    return params, state


# --------------------------------------------------------------------- training


LogFn = Callable[[int, int, LossBreakdown], None]


def clone_params(params: Params) -> Params:
    return {k: v.detach().clone() for k, v in params.items()}


def train_stage(
    stage: int,
    data: TrainData,
    params: Params,
    cfg: TrainingConfig,
    log: LogFn | None = None,
    on_checkpoint: Callable[[int, int, Params], None] | None = None,
    start_iteration: int = 0,
) -> Params:
    """Runs ``cfg.iterations(stage)`` updates and returns new parameters."""
    if stage not in STAGES:
        raise ConfigurationError(f"unknown stage {stage}")
    params = clone_params(params)
    names = trainable(stage, params)
    rng = np.random.default_rng([cfg.seed, stage])
    state = OptimizerState()
    spec, camera, w = data.spec, data.camera, cfg.weights
    for it in range(cfg.iterations(stage)):
        if stage == 1:
            items = data.sample_labelled(rng, cfg.batch_size)
        else:
            items = data.sample_pairs(rng, cfg.batch_size, cfg, unlabelled_prob=0.0 if stage == 2 else None)
        batch = data.make_batch(items, rng, cfg.rotation_augment)
        for n in names:
            params[n].requires_grad_(True)
        loss, terms = stage_loss(stage, params, batch, spec, camera, w, cfg.backward_source)
        if not bool(torch.isfinite(loss)):
            per_pair = loss_total(terms, terms, w) if "align" in terms else terms["pred"]
            bad = [batch.ids[i] for i in np.flatnonzero(~torch.isfinite(per_pair.detach()).numpy())]
            raise NonFiniteError(f"stage {stage} iteration {it}: non-finite loss for pairs (video, s, u) {bad}")
        grads = torch.autograd.grad(loss, [params[n] for n in names])
        for n in names:
            params[n].requires_grad_(False)
        adam_step(params, dict(zip(names, grads)), state, cfg)
        if log is not None:
            log(start_iteration + it + 1, stage, breakdown(terms, loss))
        if on_checkpoint is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(start_iteration + it + 1, stage, params)
    return {k: v.detach() for k, v in params.items()}


def train_stage1(data, params, cfg, **kw):
    return train_stage(1, data, params, cfg, **kw)


def train_stage2(data, params, cfg, **kw):
    return train_stage(2, data, params, cfg, **kw)


def train_stage3(data, params, cfg, **kw):
    return train_stage(3, data, params, cfg, **kw)


def train_all(data: TrainData, params: Params, cfg: TrainingConfig, log: LogFn | None = None) -> Params:
    offset = 0
    for stage in STAGES:
        params = train_stage(stage, data, params, cfg, log=log, start_iteration=offset)
        offset += cfg.iterations(stage)
    return params


# ------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    worst: tuple  # (tensor name, flat index)
    failures: list  # (name, index, analytic, numeric, rel_error)
    per_tensor: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"{status}: {self.n_checked} entries, max relative error {self.max_rel_error:.3e} (tol {self.tolerance:g})"]
        for name, idx, a, n, r in self.failures[:10]:
            lines.append(f"  {name}[{idx}]: analytic {a:.6e} numeric {n:.6e} rel {r:.3e}")
        return "\n".join(lines)


def gradient_check(
    params: Params,
    batch: PairBatch,
    spec,
    camera: CameraIntrinsics,
    weights: LossWeights = LossWeights(),
    tolerance: float = 1e-4,
    n_samples: int = 200,
    step: float = 1e-6,
    seed: int = 0,
    stage: int = 3,
    corrupt: tuple | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Autograd versus central differences on randomly chosen entries.

    Every tensor contributes at least one entry.  ``corrupt`` =
    (name, flat_index, delta) adds ``delta`` to that analytic entry and
    guarantees it is checked (fault injection).
    """
    params = clone_params(params)
    names = list(params)
    for n in names:
        params[n].requires_grad_(True)
    loss, _ = stage_loss(stage, params, batch, spec, camera, weights)
    grads = dict(zip(names, torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)))
    for n in names:
        params[n].requires_grad_(False)
        if grads[n] is None:
            grads[n] = torch.zeros_like(params[n])

    rng = np.random.default_rng(seed)
    picks = [(n, int(rng.integers(params[n].numel()))) for n in names]
    sizes = np.array([params[n].numel() for n in names], dtype=float)
    while len(picks) < n_samples:
        n = names[rng.choice(len(names), p=sizes / sizes.sum())]
        picks.append((n, int(rng.integers(params[n].numel()))))
    if corrupt is not None:
        name, idx, delta = corrupt
        grads[name] = grads[name].clone()
        grads[name].view(-1)[idx] += delta
        picks.append((name, idx))

    def f() -> float:
        with torch.no_grad():
            return float(stage_loss(stage, params, batch, spec, camera, weights)[0])

    failures, per_tensor = [], {}
    worst, max_rel = (None, None), 0.0
    for name, idx in picks:
        flat = params[name].view(-1)
        orig = float(flat[idx])
        flat[idx] = orig + step
        fp = f()
        flat[idx] = orig - step
        fm = f()
        flat[idx] = orig
        numeric = (fp - fm) / (2 * step)
        analytic = float(grads[name].view(-1)[idx])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        per_tensor[name] = max(per_tensor.get(name, 0.0), rel)
        if rel > max_rel:
            max_rel, worst = rel, (name, idx)
        if rel > tolerance:
            failures.append((name, idx, analytic, numeric, rel))
    return GradCheckReport(max_rel, len(picks), tolerance, worst, failures, per_tensor)
