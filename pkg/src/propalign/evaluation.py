"""Scoring on unlabelled frames.

Scenario 1 runs the single-frame regressor.  Scenario 2 propagates each
unlabelled frame's nearest labelled ground truth through the aligner.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import hand_model as hm
from .aligner import propagate
from .metrics import REPORT_FIELDS, MetricReport, evaluate_points
from .nets import Params
from .predictor import Annotation, FeatureVector, encode, regress
from .synth_data import Video, VideoDataset, nearest_supervised

SCENARIOS = (1, 2)


@dataclass
class FrameResult:
    video_id: int
    t: int
    source: int  # labelled frame the prediction came from (0 for scenario 1)
    report: MetricReport

    @property
    def gap(self) -> int:
        return abs(self.t - self.source) if self.source else 0


def video_features(video: Video, params: Params) -> FeatureVector:
    with torch.no_grad():
        return encode(torch.tensor(video.obs), params)


def regressor_annotations(video: Video, params: Params, spec, camera) -> Annotation:
    with torch.no_grad():
        return regress(video_features(video, params), camera, params, spec).numpy()


def propagated_annotations(video: Video, params: Params, targets: list[int], sources: list[int]) -> Annotation:
    """Carry ground truth of frames ``sources`` to frames ``targets``."""
    z = video_features(video, params)
    si, ti = np.asarray(sources) - 1, np.asarray(targets) - 1
    gt = Annotation(*(torch.tensor(a) for a in (video.root[si], video.pose[si], video.beta[si])))
    with torch.no_grad():
        out = propagate(gt, FeatureVector(z.z_r[si], z.z_theta[si]), FeatureVector(z.z_r[ti], z.z_theta[ti]), params)
    return out.numpy()


def score(video: Video, ts: list[int], pred: Annotation, spec, sources=None) -> list[FrameResult]:
    ti = np.asarray(ts) - 1
    with torch.no_grad():
        p = hm.forward(pred.beta, pred.pose, pred.root, spec)
        g = hm.forward(video.beta[ti], video.pose[ti], video.root[ti], spec)
    pj, pv, gj, gv = (x.numpy() for x in (p.joints, p.vertices, g.joints, g.vertices))
    sources = sources if sources is not None else [0] * len(ts)
    return [
        FrameResult(video.video_id, t, s, evaluate_points(pj[k], gj[k], pv[k], gv[k]))
        for k, (t, s) in enumerate(zip(ts, sources))
    ]


# (video, params, spec, camera) -> Annotation for every frame of the video
Predictor = Callable[[Video, Params, hm.HandModelSpec, object], Annotation]


def evaluate_scenario1(dataset: VideoDataset, params: Params, spec, predictor: Predictor | None = None) -> list[FrameResult]:
    """Regressor on unlabelled frames.  Predictions use observations only;
    ground truth is read solely by the metric computation."""
    predictor = predictor or regressor_annotations
    results = []
    for video in dataset.videos:
        ts = video.unlabelled_indices
        if not ts:
            continue
        pred = predictor(video, params, spec, dataset.camera)[np.asarray(ts) - 1]
        results.extend(score(video, ts, pred, spec))
    return results


def evaluate_scenario2(dataset: VideoDataset, params: Params, spec) -> list[FrameResult]:
    results = []
    for video in dataset.videos:
        labelled = video.labelled_indices
        if not labelled:
            raise ValueError(f"video {video.video_id} has no labelled frames to propagate from")
        ts = video.unlabelled_indices
        if not ts:
            continue
        sources = [nearest_supervised(u, labelled) for u in ts]
        pred = propagated_annotations(video, params, ts, sources)
        results.extend(score(video, ts, pred, spec, sources))
    return results


def evaluate(dataset: VideoDataset, params: Params, spec, scenario: int, predictor: Predictor | None = None) -> list[FrameResult]:
    if scenario == 1:
        return evaluate_scenario1(dataset, params, spec, predictor)
    if scenario == 2:
        return evaluate_scenario2(dataset, params, spec)
    raise ValueError(f"scenario must be 1 or 2, got {scenario}")


def aggregate(results: list[FrameResult]) -> MetricReport:
    return MetricReport.mean([r.report for r in results])


def gap_profile(dataset: VideoDataset, params: Params, spec) -> list[tuple[int, int, int, float]]:
    """Propagation MPJPE from both bracketing labelled frames of every
    unlabelled frame, so gaps up to K - 1 are represented.

    Returns (video_id, t, gap, mpjpe_mm) rows.
    """
    rows = []
    for video in dataset.videos:
        labelled = video.labelled_indices
        ts, srcs = [], []
        for u in video.unlabelled_indices:
            before = [s for s in labelled if s < u]
            after = [s for s in labelled if s > u]
            for s in (before[-1:] + after[:1]):
                ts.append(u)
                srcs.append(s)
        if not ts:
            continue
        pred = propagated_annotations(video, params, ts, srcs)
        for r in score(video, ts, pred, spec, srcs):
            rows.append((r.video_id, r.t, r.gap, r.report.mpjpe))
    return rows


def bucket_means(rows, edges=((1, 4), (5, 8), (9, 16))) -> list[float]:
    gaps = np.array([r[2] for r in rows])
    errs = np.array([r[3] for r in rows])
    out = []
    for lo, hi in edges:
        sel = (gaps >= lo) & (gaps <= hi)
        out.append(float(errs[sel].mean()) if sel.any() else float("nan"))
    return out


def write_frame_csv(path, results: list[FrameResult]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("video_id", "t", "source", "gap", *REPORT_FIELDS))
        for r in results:
            w.writerow([r.video_id, r.t, r.source, r.gap, *(repr(v) for v in r.report.as_row())])


def propagate_video(video: Video, params: Params, spec, camera) -> list[dict]:
    """Dense annotations for every frame: the propagated annotation (own
    ground truth on labelled frames) plus the regressor's annotation."""
    labelled = video.labelled_indices
    reg = regressor_annotations(video, params, spec, camera)
    ts = video.unlabelled_indices
    sources = [nearest_supervised(u, labelled) for u in ts]
    prop = propagated_annotations(video, params, ts, sources) if ts else None
    where = {t: k for k, t in enumerate(ts)}
    out = []
    for t in range(1, video.T + 1):
        if video.labelled[t - 1]:
            ann, src = video.gt(t), t
        else:
            ann, src = prop[where[t]], sources[where[t]]
        out.append(
            {
                "video_id": video.video_id,
                "t": t,
                "is_labelled": bool(video.labelled[t - 1]),
                "source": src,
                "propagated": ann.to_dict(),
                "regressor": reg[t - 1].to_dict(),
            }
        )
    return out
