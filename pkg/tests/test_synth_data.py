import json

import numpy as np
import pytest

from propalign import hand_model as hm
from propalign import synth_data as sd
from propalign.errors import ConfigurationError, FormatError, GenerationError, InvalidInputError
from propalign.predictor import CameraIntrinsics

CAM = CameraIntrinsics()


@pytest.mark.parametrize(
    "T, K, expected",
    [(10, 10, [1, 10]), (257, 128, [1, 129, 257]), (5, 2, [1, 3, 5]), (97, 16, [1, 17, 33, 49, 65, 81, 97]), (4, 1, [1, 2, 3, 4])],
)
def test_label_schedule_examples(T, K, expected):
    assert sd.label_schedule(T, K) == expected


def test_label_schedule_rejects_bad_stride():
    with pytest.raises(ConfigurationError):
        sd.label_schedule(97, 200)
    with pytest.raises(ConfigurationError):
        sd.label_schedule(97, 0)


def test_label_schedule_properties():
    for T in range(2, 300, 7):
        for K in (1, 2, 3, 16, 64, 128):
            if K > T:
                continue
            s = sd.label_schedule(T, K)
            assert s[0] == 1 and s[-1] == T and s == sorted(set(s))
            assert len(s) / T <= 2 / K + 2 / T
            for u in set(range(1, T + 1)) - set(s):
                assert abs(sd.nearest_supervised(u, s) - u) <= K


@pytest.mark.parametrize("u, labelled, expected", [(20, [1, 17, 33], 17), (9, [1, 17], 1), (130, [1, 129, 257], 129)])
def test_nearest_supervised_examples(u, labelled, expected):
    assert sd.nearest_supervised(u, labelled) == expected


def test_nearest_supervised_matches_brute_force(rng):
    for _ in range(200):
        labelled = sorted(set(rng.integers(1, 60, rng.integers(1, 8)).tolist()))
        u = int(rng.integers(1, 60))
        brute = min(labelled, key=lambda s: (abs(s - u), s))
        assert sd.nearest_supervised(u, labelled) == brute
    with pytest.raises(InvalidInputError):
        sd.nearest_supervised(3, [])


def test_generate_video_deterministic(spec):
    cfg = sd.MotionConfig(frames=40, seed=3)
    a, b = sd.generate_video(cfg, spec, CAM, K=8), sd.generate_video(cfg, spec, CAM, K=8)
    for f in ("obs", "root", "pose", "beta", "labelled"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    c = sd.generate_video(sd.MotionConfig(frames=40, seed=4), spec, CAM, K=8)
    assert not np.array_equal(a.pose, c.pose)


def test_noiseless_observation_is_exact_projection(spec):
    cfg = sd.MotionConfig(frames=30, seed=1, obs_noise_sigma=0.0, occlusion_prob=0.0)
    v = sd.generate_video(cfg, spec, CAM)
    joints = hm.forward(v.beta, v.pose, v.root, spec, with_vertices=False).joints.numpy()
    obs = v.obs.reshape(30, 21, 3)
    np.testing.assert_array_equal(obs[..., :2], joints[..., :2] / joints[..., 2:3])
    assert np.all(obs[..., 2] == 1.0)


def test_occlusion_zeroes_coordinates(spec):
    v = sd.generate_video(sd.MotionConfig(frames=50, seed=2, occlusion_prob=0.3), spec, CAM)
    obs = v.obs.reshape(50, 21, 3)
    hidden = obs[..., 2] == 0.0
    assert hidden.any() and set(np.unique(obs[..., 2])) <= {0.0, 1.0}
    assert np.all(obs[hidden][:, :2] == 0.0)


def test_trajectory_invariants(spec):
    v = sd.generate_video(sd.MotionConfig(frames=300, seed=9), spec, CAM, K=16)
    assert np.all(v.beta == v.beta[0])
    assert v.root[:, 2].min() >= 0.3 and v.root[:, 2].max() <= 0.7
    norms = np.linalg.norm(v.pose[:, 3:].reshape(-1, 15, 3), axis=-1)
    assert norms.max() <= np.pi / 2 + 1e-12
    # articulation stays inside the regressor's PCA span
    art = v.pose[:, 3:]
    np.testing.assert_allclose(art @ spec.pca_basis @ spec.pca_basis.T, art, atol=1e-12)
    assert v.labelled_indices == sd.label_schedule(300, 16)
    assert sorted(v.labelled_indices + v.unlabelled_indices) == list(range(1, 301))


@pytest.mark.slow
def test_pose_step_bound_over_1e5_steps(spec):
    cfg = sd.MotionConfig(frames=100_001, seed=11)
    v = sd.generate_video(cfg, spec, CAM)
    # the cap is applied in floating point, so allow rounding only
    assert np.abs(np.diff(v.pose, axis=0)).max() <= 3 * cfg.pose_step_sigma + 1e-12


def test_generation_error_when_frustum_cannot_hold_root(spec):
    with pytest.raises(GenerationError):
        sd.generate_video(sd.MotionConfig(frames=10, seed=0, root_step_sigma=5.0), spec, CAM)


def test_motion_config_validation():
    with pytest.raises(ConfigurationError):
        sd.MotionConfig(occlusion_prob=1.0)
    with pytest.raises(ConfigurationError):
        sd.MotionConfig(pose_step_sigma=-0.1)
    with pytest.raises(ConfigurationError):
        sd.MotionConfig(frames=1)


def test_dataset_seeds_are_independent(spec):
    train = sd.generate_dataset(3, 8, spec, motion=sd.MotionConfig(frames=20), seed=1, split="train")
    test = sd.generate_dataset(3, 8, spec, motion=sd.MotionConfig(frames=20), seed=1, split="test")
    other = sd.generate_dataset(3, 8, spec, motion=sd.MotionConfig(frames=20), seed=2, split="train")
    poses = [v.pose[0].tobytes() for ds in (train, test, other) for v in ds.videos]
    assert len(set(poses)) == 9


def test_dataset_round_trip(small_dataset, tmp_path):
    path = tmp_path / "d.jsonl"
    sd.save_dataset(small_dataset, path)
    back = sd.load_dataset(path)
    assert back.K == small_dataset.K and back.camera == small_dataset.camera and back.meta == small_dataset.meta
    for a, b in zip(small_dataset.videos, back.videos):
        for f in ("obs", "root", "pose", "beta", "labelled"):
            assert np.array_equal(getattr(a, f), getattr(b, f))
    header = json.loads(path.read_text().splitlines()[0])
    assert header["counts"] == small_dataset.counts()
    sd.save_dataset(back, tmp_path / "again.jsonl")
    assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()


def test_dataset_load_rejects_corruption(small_dataset, tmp_path):
    path = tmp_path / "d.jsonl"
    sd.save_dataset(small_dataset, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(FormatError):
        sd.load_dataset(path)
    header = json.loads(lines[0])
    header["format_version"] = 7
    path.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
    with pytest.raises(FormatError):
        sd.load_dataset(path)


def test_rotation_about_optical_axis_commutes_with_projection(spec):
    v = sd.generate_video(sd.MotionConfig(frames=3, seed=5, obs_noise_sigma=0.0, occlusion_prob=0.0), spec, CAM)
    obs, ann = sd.rotate_about_camera_axis(v.obs[1], v.gt(2), 0.3)
    joints = hm.forward(ann.beta, ann.pose, ann.root, spec, with_vertices=False).joints.numpy()
    np.testing.assert_allclose(obs.reshape(21, 3)[:, :2], sd.project(joints), atol=1e-12)
