import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from propalign import metrics as m
from propalign.errors import DegenerateInputError, InvalidInputError, ShapeError
from propalign.predictor import Annotation


def test_mpjpe_examples(rng):
    gt = rng.normal(size=(21, 3))
    assert m.mpjpe(gt, gt) == 0.0
    assert m.mpjpe(gt + [0.0, 0.0, 0.002], gt) == pytest.approx(2.0, abs=1e-12)
    pred = gt.copy()
    pred[4] += [0.003, 0.004, 0.0]
    assert m.mpjpe(pred, gt) == pytest.approx(0.23809523809523808, abs=1e-12)
    with pytest.raises(ShapeError):
        m.mpjpe(gt[:20], gt)


def test_align_translation_examples(rng):
    gt = rng.normal(size=(21, 3))
    assert m.mpjpe(m.align_translation(gt + [1.0, -2.0, 0.5], gt), gt) == pytest.approx(0.0, abs=1e-9)
    np.testing.assert_array_equal(m.align_translation(gt, gt), gt)
    pred = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    target = pred.copy()
    target[1, 2] += 0.003
    assert m.mpjpe(m.align_translation(pred, target), target) == pytest.approx(1.5, abs=1e-9)
    with pytest.raises(IndexError):
        m.align_translation(pred, target, root_index=5)


def test_align_translation_is_rigid_shift(rng):
    pred, gt = rng.normal(size=(21, 3)), rng.normal(size=(21, 3))
    out = m.align_translation(pred, gt)
    d = lambda x: np.linalg.norm(x[:, None] - x[None], axis=-1)  # noqa: E731
    np.testing.assert_allclose(d(out), d(pred), atol=1e-12)


def test_procrustes_identity_and_similarity(rng):
    gt = rng.normal(size=(21, 3))
    aligned, tf = m.align_procrustes(gt, gt)
    assert m.mpjpe(aligned, gt) < 1e-9
    assert tf.scale == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(tf.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(tf.translation, 0.0, atol=1e-12)
    rz = Rotation.from_rotvec([0.0, 0.0, np.pi / 2]).as_matrix()
    pred = 2.0 * gt @ rz.T + [1.0, 2.0, 3.0]
    aligned, tf = m.align_procrustes(pred, gt)
    assert m.mpjpe(aligned, gt) < 1e-9
    assert tf.scale == pytest.approx(0.5, abs=1e-12)
    assert np.linalg.det(tf.rotation) == pytest.approx(1.0, abs=1e-12)


def test_procrustes_never_reflects(rng):
    gt = rng.normal(size=(21, 3))
    mirrored = gt * [1.0, 1.0, -1.0]
    aligned, tf = m.align_procrustes(mirrored, gt)
    assert np.linalg.det(tf.rotation) == pytest.approx(1.0, abs=1e-12)
    assert m.mpjpe(aligned, gt) > 1.0


def test_procrustes_degenerate_inputs():
    gt = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    with pytest.raises(DegenerateInputError):
        m.align_procrustes(gt, gt)
    with pytest.raises(DegenerateInputError):
        m.align_procrustes(gt[:2], gt[:2])


def test_scaled_depth_examples(rng):
    gt = rng.normal(0.0, 0.05, (21, 3)) + [0.0, 0.0, 0.5]
    np.testing.assert_allclose(m.align_scaled_depth(gt, gt), gt, atol=1e-15)
    c = gt.mean(axis=0)
    pred = 1.3 * (gt - c) + c + [0.0, 0.0, 0.2]
    assert m.mpjpe(m.align_scaled_depth(pred, gt), gt) < 1e-9
    assert m.mpjpe(m.align_scaled_depth(gt + [0.010, 0.0, 0.0], gt), gt) == pytest.approx(10.0, abs=1e-9)
    with pytest.raises(DegenerateInputError):
        m.align_scaled_depth(np.ones((21, 3)), gt)


def test_f_score_examples(rng):
    gt = rng.normal(size=(30, 3))
    assert m.f_score(gt, gt, 5.0) == 1.0
    assert m.f_score(gt + 10.0, gt, 5.0) == 0.0
    pred = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.020]])
    target = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.100]])
    assert m.f_score(pred, target, 5.0) == 0.5
    with pytest.raises(ShapeError):
        m.f_score(np.zeros((0, 3)), target, 5.0)
    with pytest.raises(InvalidInputError):
        m.f_score(pred, target, 0.0)


def test_f_score_unequal_sizes_and_permutation(rng):
    pred, gt = rng.normal(0.0, 0.01, (40, 3)), rng.normal(0.0, 0.01, (25, 3))
    f = m.f_score(pred, gt, 8.0)
    assert m.f_score(pred[rng.permutation(40)], gt[rng.permutation(25)], 8.0) == f
    # order matters for corresponding-point errors
    base = rng.normal(size=(21, 3))
    assert m.mpjpe(base[::-1], base) > 0.0


def test_f_score_monotone_in_tau(rng):
    pred, gt = rng.normal(0.0, 0.02, (50, 3)), rng.normal(0.0, 0.02, (50, 3))
    taus = [0.5, 1, 2, 5, 10, 20, 50, 1e9]
    scores = [m.f_score(pred, gt, t) for t in taus]
    assert all(a <= b for a, b in zip(scores, scores[1:]))
    assert scores[-1] == 1.0


def test_evaluate_frame_examples(spec, rng):
    gt = Annotation(np.array([0.01, -0.02, 0.5]), rng.normal(0.0, 0.3, 48), rng.normal(size=10))
    same = m.evaluate_frame(gt, gt, spec)
    assert same.f5 == same.f15 == 1.0
    assert same.mpjpe == same.mpvpe == same.mpjpe_t == 0.0
    assert max(same.mpjpe_sd, same.mpjpe_p, same.mpvpe_p) < 1e-9

    depth = m.evaluate_frame(Annotation(gt.root + [0.0, 0.0, 0.05], gt.pose, gt.beta), gt, spec)
    assert depth.mpjpe == pytest.approx(50.0, abs=1e-9)
    assert depth.mpjpe_t < 1e-9 and depth.mpjpe_sd < 1e-9 and depth.mpjpe_p < 1e-9

    side = m.evaluate_frame(Annotation(gt.root + [0.05, 0.0, 0.0], gt.pose, gt.beta), gt, spec)
    assert side.mpjpe == pytest.approx(50.0, abs=1e-9)
    assert side.mpjpe_sd == pytest.approx(50.0, abs=1e-9)
    assert side.mpjpe_t < 1e-9 and side.mpjpe_p < 1e-9


def test_report_mean_and_csv_round_trip(tmp_path):
    a = m.MetricReport(1.0, 1.0, 2.0, 1.0, 3.0, 2.0, 2.5, 1.5)
    b = m.MetricReport(0.5, 0.75, 4.0, 3.0, 5.0, 4.0, 4.5, 3.5)
    mean = m.MetricReport.mean([a, b])
    assert mean.as_row() == (0.75, 0.875, 3.0, 2.0, 4.0, 3.0, 3.5, 2.5)
    with pytest.raises(InvalidInputError):
        m.MetricReport.mean([])
    path = tmp_path / "r.csv"
    m.write_report_csv(path, [("test", 2, "propagation", mean)])
    lines = path.read_text().splitlines()
    assert lines[0] == "split,scenario,model,F@5,F@15,MPVPE,MPVPE(P),MPJPE,MPJPE(T),MPJPE(SD),MPJPE(P)"
    assert m.read_report_csv(path) == [("test", "2", "propagation", mean)]


def test_non_finite_points_rejected():
    bad = np.zeros((21, 3))
    bad[3, 1] = np.nan
    with pytest.raises(InvalidInputError):
        m.mpjpe(bad, np.zeros((21, 3)))


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (8, 3), elements=st.floats(-1.0, 1.0)),
    arrays(np.float64, (8, 3), elements=st.floats(-0.2, 0.2)),
)
def test_alignment_ordering_property(gt, noise):
    pred = gt + noise
    if np.linalg.matrix_rank(gt - gt.mean(0), tol=1e-3) < 2:
        return
    # the exact ordering holds for the root-mean-square error each step minimises
    rms = lambda p: np.sqrt(np.mean(np.sum((p - gt) ** 2, axis=1)))  # noqa: E731
    try:
        aligned = m.align_procrustes(pred, gt)[0]
    except DegenerateInputError:
        return
    assert rms(aligned) <= rms(m.align_centroid(pred, gt)) + 1e-12
    assert rms(m.align_centroid(pred, gt)) <= rms(pred) + 1e-12
