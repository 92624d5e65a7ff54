"""Independent reference computations shared by the tests."""
import numpy as np
import torch

from propalign import hand_model as hm
from propalign.metrics import MetricReport, evaluate_points


def nearest_label(u, labelled):
    best = None
    for s in labelled:
        if best is None or abs(s - u) < abs(best - u):
            best = s
    return best


def copy_propagation(dataset, spec):
    """Scenario 2 with the aligner replaced by copying the nearest label."""
    reports = []
    for video in dataset.videos:
        labelled = [t for t in range(1, video.T + 1) if video.labelled[t - 1]]
        for u in range(1, video.T + 1):
            if video.labelled[u - 1]:
                continue
            s = nearest_label(u, labelled)
            with torch.no_grad():
                p = hm.forward(video.beta[s - 1], video.pose[s - 1], video.root[s - 1], spec)
                g = hm.forward(video.beta[u - 1], video.pose[u - 1], video.root[u - 1], spec)
            reports.append(evaluate_points(p.joints.numpy(), g.joints.numpy(), p.vertices.numpy(), g.vertices.numpy()))
    return MetricReport.mean(reports)


def copy_annotations(video):
    """Frame -> (source, root, pose, beta) under nearest-label copying."""
    labelled = [t for t in range(1, video.T + 1) if video.labelled[t - 1]]
    out = {}
    for t in range(1, video.T + 1):
        s = t if video.labelled[t - 1] else nearest_label(t, labelled)
        out[t] = (s, video.root[s - 1].tolist(), video.pose[s - 1].tolist(), video.beta[s - 1].tolist())
    return out


def max_abs_diff(a: MetricReport, b: MetricReport) -> float:
    return float(np.max(np.abs(np.array(a.as_row()) - np.array(b.as_row()))))
