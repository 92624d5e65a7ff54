import csv

import numpy as np
import pytest

from oracles import copy_annotations, copy_propagation, max_abs_diff
from propalign import evaluation as ev
from propalign import predictor as pr
from propalign.metrics import REPORT_FIELDS


def _gt_predictor(video, params, spec, camera):
    return pr.Annotation(video.root.copy(), video.pose.copy(), video.beta.copy())


def test_scenario1_oracle_gives_zero_errors(small_dataset, spec):
    results = ev.evaluate(small_dataset, pr.init_params(0), spec, 1, predictor=_gt_predictor)
    report = ev.aggregate(results)
    assert report.f5 == report.f15 == 1.0
    assert report.mpjpe == report.mpvpe == report.mpjpe_t == 0.0
    assert max(report.mpjpe_p, report.mpvpe_p, report.mpjpe_sd) < 1e-9
    assert len(results) == sum(len(v.unlabelled_indices) for v in small_dataset.videos)


def test_scenario1_reads_only_observations(small_dataset, spec):
    params = pr.init_params(0)
    seen = []

    def spy(video, p, s, cam):
        seen.append(video.video_id)
        return ev.regressor_annotations(video, p, s, cam)

    a = ev.aggregate(ev.evaluate(small_dataset, params, spec, 1, predictor=spy))
    # corrupting unlabelled ground truth only moves the error, never the predictions
    b = ev.regressor_annotations(small_dataset.videos[0], params, spec, small_dataset.camera)
    v = small_dataset.videos[0]
    saved = v.pose.copy()
    v.pose[~v.labelled] += 0.1
    try:
        c = ev.regressor_annotations(v, params, spec, small_dataset.camera)
    finally:
        v.pose[:] = saved
    assert np.array_equal(b.pose, c.pose) and seen == [0, 1, 2, 3] and a.mpjpe > 0


def test_scenario2_zero_init_matches_copy_oracle(small_dataset, spec):
    results = ev.evaluate(small_dataset, pr.init_params(0), spec, 2)
    assert max_abs_diff(ev.aggregate(results), copy_propagation(small_dataset, spec)) <= 1e-12
    r = results[0]
    assert r.source == 1 and r.t == 2 and r.gap == 1
    assert all(r.gap <= small_dataset.K // 2 for r in results)


def test_propagate_video_zero_init_is_copy(small_dataset, spec):
    v = small_dataset.videos[1]
    recs = ev.propagate_video(v, pr.init_params(0), spec, small_dataset.camera)
    expected = copy_annotations(v)
    assert len(recs) == v.T
    for rec in recs:
        s, root, pose, beta = expected[rec["t"]]
        assert rec["source"] == s and rec["is_labelled"] == bool(v.labelled[rec["t"] - 1])
        assert rec["propagated"] == {"root": root, "pose": pose, "beta": beta}


def test_propagate_video_labelled_frames_pass_through(small_dataset, spec):
    from test_aligner import trained_like

    v = small_dataset.videos[2]
    recs = ev.propagate_video(v, trained_like(1), spec, small_dataset.camera)
    for rec in recs:
        if rec["is_labelled"]:
            assert rec["propagated"]["pose"] == v.pose[rec["t"] - 1].tolist()
        else:
            assert rec["propagated"]["beta"] == v.beta[rec["source"] - 1].tolist()


def test_gap_profile_covers_both_neighbours(small_dataset, spec):
    rows = ev.gap_profile(small_dataset, pr.init_params(0), spec)
    K = small_dataset.K
    unlabelled = sum(len(v.unlabelled_indices) for v in small_dataset.videos)
    assert len(rows) == 2 * unlabelled
    gaps = sorted({r[2] for r in rows})
    assert gaps == list(range(1, K))
    per_frame = {}
    for vid, t, gap, _ in rows:
        per_frame.setdefault((vid, t), []).append(gap)
    assert all(sum(g) == K for g in per_frame.values())


def test_bucket_means():
    rows = [(0, 1, 1, 1.0), (0, 2, 4, 3.0), (0, 3, 5, 10.0), (0, 4, 9, 7.0), (0, 5, 16, 9.0)]
    assert ev.bucket_means(rows) == [2.0, 10.0, 8.0]
    assert np.isnan(ev.bucket_means(rows[:2])[1])


def test_evaluate_rejects_unknown_scenario(small_dataset, spec):
    with pytest.raises(ValueError):
        ev.evaluate(small_dataset, pr.init_params(0), spec, 3)


def test_frame_csv(small_dataset, spec, tmp_path):
    results = ev.evaluate(small_dataset, pr.init_params(0), spec, 2)
    path = tmp_path / "f.csv"
    ev.write_frame_csv(path, results)
    rows = list(csv.reader(path.open()))
    assert tuple(rows[0]) == ("video_id", "t", "source", "gap", *REPORT_FIELDS)
    assert len(rows) == len(results) + 1
    assert float(rows[1][8]) == results[0].report.mpjpe
