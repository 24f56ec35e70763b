"""Semi-supervised single-stage object detection on synthetic data.

Teacher-student training with EMA parameter transfer, confidence
reweighting for the classification branch, similarity-based pseudo-box
fusion for the regression branch, and a deformable-conv encoder neck,
all on a hand-rolled numpy autodiff core.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward, no_grad
from .config import ExperimentConfig
from .detector import AnchorConfig, Detector, DetectorConfig, DexEncoderConfig
from .geometry import BBox, Detection, iou, nms, union_box
from .pseudo import PseudoConfig, PseudoLabelSet, adso, fusion_box

__all__ = [
    "AnchorConfig",
    "BBox",
    "Detection",
    "Detector",
    "DetectorConfig",
    "DexEncoderConfig",
    "ExperimentConfig",
    "PseudoConfig",
    "PseudoLabelSet",
    "Tape",
    "Tensor",
    "adso",
    "backward",
    "fusion_box",
    "iou",
    "nms",
    "no_grad",
    "union_box",
    "__version__",
]
