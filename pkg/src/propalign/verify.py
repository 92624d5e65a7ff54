"""Self-checks behind ``propalign verify``.

Each check returns a :class:`CheckResult`.  The reference values come from
independent routes (closed-form kinematics, brute-force random search,
constructed corruptions), never from the function under test.  ``fault``
names a check whose computation is deliberately perturbed, so the harness
itself can be shown to fail.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from . import hand_model as hm
from .aligner import propagate
from .metrics import align_centroid, align_procrustes, align_scaled_depth, mpjpe
from .predictor import Annotation, encode, init_params
from .synth_data import generate_dataset
from .trainer import TrainData, TrainingConfig, clone_params, gradient_check

CHECKS = ("kinematics", "procrustes", "metrics", "identity", "gradient")
KINEMATICS_TOL = 1e-9
PROCRUSTES_TOL_MM = 1e-6
ORDER_SLACK_MM = 1e-9
SD_TOL_MM = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def random_similarity(rng: np.random.Generator):
    """(scale, rotation, translation) with scale in [0.5, 2]."""
    return rng.uniform(0.5, 2.0), Rotation.random(random_state=rng).as_matrix(), rng.normal(0.0, 0.1, 3)


# ------------------------------------------------------------------ kinematics


def kinematics_errors(spec: hm.HandModelSpec, n: int = 20, seed: int = 0, fault: bool = False) -> dict:
    """Max absolute deviation (m) for the four kinematic identities."""
    rng = np.random.default_rng(seed)
    beta = rng.normal(size=(n, hm.NUM_BETAS))
    pose = rng.normal(0.0, 0.4, (n, hm.POSE_DIM))
    root = rng.normal(0.0, 0.1, (n, 3)) + [0.0, 0.0, 0.5]
    zeros_pose = np.zeros((n, hm.POSE_DIM))
    with torch.no_grad():
        rest = hm.forward(np.zeros((n, hm.NUM_BETAS)), zeros_pose, root, spec)
        expected_j = spec.template_joints - spec.template_joints[0] + root[:, None]
        expected_v = spec.template_vertices - spec.template_joints[0] + root[:, None]
        rest_err = max(np.abs(rest.joints.numpy() - expected_j).max(), np.abs(rest.vertices.numpy() - expected_v).max())

        # a root rotation R is a rigid rotation of the whole hand about the root
        unrotated = pose.copy()
        unrotated[:, :3] = 0.0
        a = hm.forward(beta, pose, root, spec)
        b = hm.forward(beta, unrotated, np.zeros((n, 3)), spec)
        R = Rotation.from_rotvec(pose[:, :3]).as_matrix()
        rigid_j = np.einsum("nij,nkj->nki", R, b.joints.numpy()) + root[:, None]
        rigid_v = np.einsum("nij,nkj->nki", R, b.vertices.numpy()) + root[:, None]
        rigid_err = max(np.abs(a.joints.numpy() - rigid_j).max(), np.abs(a.vertices.numpy() - rigid_v).max())

        shaped_rest = hm.forward(beta, zeros_pose, root, spec).joints
        posed = a.joints
        if fault:
            posed = posed + 1e-6 * torch.arange(hm.NUM_JOINTS, dtype=torch.float64)[:, None]
        bone_err = float((hm.bone_lengths(posed) - hm.bone_lengths(shaped_rest)).abs().max())

        b1, b2 = beta, rng.normal(size=(n, hm.NUM_BETAS))
        r0 = np.zeros((n, 3))
        j = lambda bb: hm.forward(bb, zeros_pose, r0, spec).joints.numpy()  # noqa: E731
        lin_err = np.abs((j(b1 + b2) - j(b2)) - (j(b1) - j(np.zeros_like(b1)))).max()
    return {"rest_pose": float(rest_err), "root_rotation": float(rigid_err), "bone_lengths": bone_err, "shape_linearity": float(lin_err)}


def check_kinematics(spec: hm.HandModelSpec, quick: bool = False, fault: bool = False) -> CheckResult:
    t0 = time.perf_counter()
    errs = kinematics_errors(spec, n=5 if quick else 50, fault=fault)
    worst = max(errs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    return CheckResult("kinematics", worst < KINEMATICS_TOL, f"{detail} (tol {KINEMATICS_TOL:g} m)", time.perf_counter() - t0)


# ------------------------------------------------------------------ Procrustes


def procrustes_recovery_error(trials: int = 1000, n_points: int = 21, seed: int = 0, fault: bool = False) -> float:
    """Worst aligned MPJPE (mm) over exact similarity-transformed copies."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        gt = rng.normal(0.0, 0.05, (n_points, 3))
        s, R, t = random_similarity(rng)
        pred = (gt - t) @ R / s  # gt = s * R @ pred + t
        aligned, _ = align_procrustes(pred, gt)
        if fault:
            aligned = aligned * (1.0 + 1e-6)
        worst = max(worst, mpjpe(aligned, gt))
    return worst


def similarity_search(pred: np.ndarray, gt: np.ndarray, n_samples: int = 1_000_000, rounds: int = 10, seed: int = 0):
    """Best sum of squared residuals found by coarse-to-fine random search
    over (log scale, rotation vector, translation); uses no SVD.

    Rotation and scale act about the centroid of ``pred`` and the
    translation is an offset from the centroid of ``gt``, so the search
    window does not depend on where the points sit.
    """
    rng = np.random.default_rng(seed)
    per_round = n_samples // rounds
    mu_p, mu_g = pred.mean(0), gt.mean(0)
    centred = pred - mu_p
    best = np.zeros(7)
    best[0] = np.log(np.linalg.norm(gt - mu_g) / np.linalg.norm(centred))
    best_cost = np.inf
    width = np.array([0.5, np.pi, np.pi, np.pi, 0.1, 0.1, 0.1])
    for r in range(rounds):
        cand = best + rng.uniform(-1.0, 1.0, (per_round, 7)) * width
        if r == 0:
            cand[:, 1:4] = Rotation.random(per_round, random_state=rng).as_rotvec()
        R = Rotation.from_rotvec(cand[:, 1:4]).as_matrix()
        moved = np.exp(cand[:, 0])[:, None, None] * np.einsum("nij,kj->nki", R, centred) + (mu_g + cand[:, 4:])[:, None]
        cost = ((moved - gt) ** 2).sum(axis=(1, 2))
        k = int(np.argmin(cost))
        if cost[k] < best_cost:
            best, best_cost = cand[k], float(cost[k])
        width = width * 0.5
    return best_cost


def procrustes_residual(pred, gt) -> float:
    aligned, _ = align_procrustes(pred, gt)
    return float(((aligned - gt) ** 2).sum())


def perturbed_tetrahedron(rng: np.random.Generator, noise: float = 0.01):
    gt = np.array([[1.0, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]) * 0.05 + rng.normal(0.0, 0.01, (4, 3))
    s, R, t = random_similarity(rng)
    pred = (gt - t) @ R / s + rng.normal(0.0, noise, (4, 3))
    return pred, gt


def check_procrustes(quick: bool = False, fault: bool = False) -> CheckResult:
    t0 = time.perf_counter()
    worst = procrustes_recovery_error(trials=100 if quick else 1000, fault=fault)
    ok = worst < PROCRUSTES_TOL_MM
    detail = f"exact recovery worst {worst:.2e} mm"
    if not quick:
        rng = np.random.default_rng(1)
        ratios = []
        for _ in range(3):
            pred, gt = perturbed_tetrahedron(rng)
            ours, oracle = procrustes_residual(pred, gt), similarity_search(pred, gt, n_samples=200_000)
            ratios.append(ours / oracle)
        ok = ok and max(ratios) <= 1.02
        detail += f"; residual / search-oracle max {max(ratios):.4f}"
    return CheckResult("procrustes", ok, detail, time.perf_counter() - t0)


# --------------------------------------------------------------------- metrics


def alignment_order_violation(pairs: int = 1000, seed: int = 0) -> float:
    """Largest amount (mm) by which P <= centroid <= unaligned is broken."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(pairs):
        gt = rng.normal(0.0, 0.05, (21, 3))
        pred = gt + rng.normal(0.0, 0.02, (21, 3)) + rng.normal(0.0, 0.05, 3)
        raw = mpjpe(pred, gt)
        cen = mpjpe(align_centroid(pred, gt), gt)
        pro = mpjpe(align_procrustes(pred, gt)[0], gt)
        worst = max(worst, pro - cen, cen - raw)
    return float(worst)


def sd_corruption_error(trials: int = 100, seed: int = 0, fault: bool = False) -> float:
    """Worst SD-aligned error (mm) after a pure scale + depth corruption."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        gt = rng.normal(0.0, 0.05, (21, 3)) + [0.0, 0.0, 0.5]
        c = gt.mean(0)
        pred = rng.uniform(0.5, 2.0) * (gt - c) + c + [0.0, 0.0, rng.normal(0.0, 0.1)]
        out = align_scaled_depth(pred, gt)
        if fault:
            out = out + [0.0, 0.0, 1e-6]
        worst = max(worst, mpjpe(out, gt))
    return worst


def check_metrics(quick: bool = False, fault: bool = False) -> CheckResult:
    t0 = time.perf_counter()
    violation = alignment_order_violation(pairs=100 if quick else 1000)
    sd = sd_corruption_error(trials=20 if quick else 100, fault=fault)
    ok = violation <= ORDER_SLACK_MM and sd < SD_TOL_MM
    detail = f"ordering violation {violation:.2e} mm, SD corruption residual {sd:.2e} mm"
    return CheckResult("metrics", ok, detail, time.perf_counter() - t0)


# -------------------------------------------------------------------- identity


def check_identity(quick: bool = False, fault: bool = False) -> CheckResult:
    """Zero-initialised aligner heads propagate ground truth unchanged."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    params = init_params(0)
    if fault:
        params["aligner.root.2.bias"] = params["aligner.root.2.bias"] + 1e-9
    n = 8 if quick else 64
    obs_s, obs_u = rng.normal(0.0, 0.2, (2, n, 63))
    gt = Annotation(*(torch.tensor(a) for a in (rng.normal(0, 0.1, (n, 3)), rng.normal(0, 0.3, (n, 48)), rng.normal(size=(n, 10)))))
    with torch.no_grad():
        z_s, z_u = encode(torch.tensor(obs_s), params), encode(torch.tensor(obs_u), params)
        out = propagate(gt, z_s, z_u, params)
    same = all(torch.equal(getattr(out, f), getattr(gt, f)) for f in ("root", "pose", "beta"))
    return CheckResult("identity", same, "propagated == source annotation bitwise" if same else "propagation moved the source", time.perf_counter() - t0)


# -------------------------------------------------------------------- gradient


def gradient_fixture(spec: hm.HandModelSpec, batch_size: int = 4, seed: int = 0):
    """Small random network with non-zero aligner heads and a stage-3 batch."""
    rng = np.random.default_rng(seed)
    ds = generate_dataset(4, 16, spec, seed=seed)
    data = TrainData(ds, spec)
    params = clone_params(init_params(seed))
    for name in params:
        if name.startswith("aligner") and ".2." in name:
            params[name] = torch.tensor(rng.normal(0.0, 0.05, params[name].shape))
    batch = data.make_batch(data.sample_pairs(rng, batch_size, TrainingConfig.desk(seed=seed)))
    return params, batch, ds.camera


def check_gradient(spec: hm.HandModelSpec, quick: bool = False, fault: bool = False) -> CheckResult:
    t0 = time.perf_counter()
    params, batch, camera = gradient_fixture(spec)
    corrupt = ("aligner.rot.1.weight", 5, 1e-3) if fault else None
    rep = gradient_check(params, batch, spec, camera, n_samples=40 if quick else 200, corrupt=corrupt)
    detail = f"{rep.n_checked} entries, max rel {rep.max_rel_error:.2e} at {rep.worst[0]}[{rep.worst[1]}]"
    return CheckResult("gradient", rep.passed, detail, time.perf_counter() - t0)


def run_suite(spec: hm.HandModelSpec | None = None, quick: bool = False, fault: str | None = None) -> list[CheckResult]:
    if fault is not None and fault not in CHECKS:
        raise ValueError(f"unknown fault target {fault!r}; choose from {CHECKS}")
    spec = spec or hm.make_toy_hand(0)
    return [
        check_kinematics(spec, quick, fault == "kinematics"),
        check_procrustes(quick, fault == "procrustes"),
        check_metrics(quick, fault == "metrics"),
        check_identity(quick, fault == "identity"),
        check_gradient(spec, quick, fault == "gradient"),
    ]
