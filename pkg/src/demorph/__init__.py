"""Reference-free face de-morphing with a branched denoising UNet, on synthetic faces."""

from .checkpoint import CheckpointError
from .demorpher import (
    BranchedDemorpher,
    BranchedUNet,
    DemorphOutput,
    TrainConfig,
    TrainingDiverged,
    crossroad_loss,
    demorph_direct,
    demorph_iterative,
    unet_forward,
)
from .evalkit import (
    MorphAttackDetector,
    mad_classify,
    mad_metrics,
    restoration_accuracy,
    roc_det_points,
    similarity_histograms,
)
from .morphops import FaceComparator, IdentitySpec, MorphSample, default_comparator, make_dataset, morph
from .schedule import NoiseSchedule, build_linear_schedule

__version__ = "0.1.0"

__all__ = [
    "BranchedDemorpher",
    "BranchedUNet",
    "CheckpointError",
    "DemorphOutput",
    "FaceComparator",
    "IdentitySpec",
    "MorphAttackDetector",
    "MorphSample",
    "NoiseSchedule",
    "TrainConfig",
    "TrainingDiverged",
    "build_linear_schedule",
    "crossroad_loss",
    "default_comparator",
    "demorph_direct",
    "demorph_iterative",
    "mad_classify",
    "mad_metrics",
    "make_dataset",
    "morph",
    "restoration_accuracy",
    "roc_det_points",
    "similarity_histograms",
    "unet_forward",
]
