"""Semi-supervised hand pose label propagation on sparsely annotated videos."""
from .errors import PropalignError
from .hand_model import HandModelSpec, forward, make_toy_hand
from .metrics import MetricReport, align_procrustes, mpjpe
from .predictor import Annotation, CameraIntrinsics, init_params
from .trainer import TrainingConfig

__version__ = "0.1.0"
__all__ = [
    "Annotation",
    "CameraIntrinsics",
    "HandModelSpec",
    "MetricReport",
    "PropalignError",
    "TrainingConfig",
    "align_procrustes",
    "forward",
    "init_params",
    "make_toy_hand",
    "mpjpe",
]
