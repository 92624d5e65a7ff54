"""What each alignment in the report removes.

One ground-truth hand and three corrupted predictions: a depth shift, a
sideways shift and a perturbed pose.  Watch which columns go to zero.
"""
import numpy as np

from propalign import hand_model as hm
from propalign.metrics import TABLE_COLUMNS, evaluate_frame
from propalign.predictor import Annotation

spec = hm.make_toy_hand(0)
rng = np.random.default_rng(0)
gt = Annotation(np.array([0.02, -0.01, 0.5]), rng.normal(0.0, 0.3, hm.POSE_DIM), rng.normal(size=hm.NUM_BETAS))

cases = {
    "depth +5 cm": Annotation(gt.root + [0.0, 0.0, 0.05], gt.pose, gt.beta),
    "sideways +5 cm": Annotation(gt.root + [0.05, 0.0, 0.0], gt.pose, gt.beta),
    "wrong pose": Annotation(gt.root, gt.pose + rng.normal(0.0, 0.1, hm.POSE_DIM), gt.beta),
}
print(f"{'':16s}" + "".join(f"{c:>11s}" for c in TABLE_COLUMNS))
for name, pred in cases.items():
    row = evaluate_frame(pred, gt, spec).as_row()
    print(f"{name:16s}" + "".join(f"{v:11.3f}" for v in row))

# depth only: T, SD and P alignment all remove it.  Sideways: SD keeps it.
# A pose error survives every alignment, which is the point of the metric.
