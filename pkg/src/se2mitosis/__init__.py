"""Rotation-invariant mitosis detection with SE(2,N) group-equivariant CNNs on numpy."""

from .augmentation import AugmentationConfig, AugmentationDraw, apply_augmentation, sample_draw
from .data import Dataset, FoldSpec, SamplePool, extract_patch, make_folds, sample_batch
from .detection import (Detection, ensemble_vote, extract_candidates, match_detections, pr_curve,
                        select_operating_point)
from .estimators import MitosisDetector, SE2PatchClassifier
from .model import ModelConfig, ProbabilityMap, forward_dense, forward_patch, init_model
from .training import TrainConfig, TrainReport, run_experiment, train_fold

__version__ = "0.1.0"

__all__ = [
    "AugmentationConfig", "AugmentationDraw", "apply_augmentation", "sample_draw",
    "Dataset", "FoldSpec", "SamplePool", "extract_patch", "make_folds", "sample_batch",
    "Detection", "ensemble_vote", "extract_candidates", "match_detections", "pr_curve",
    "select_operating_point", "MitosisDetector", "SE2PatchClassifier",
    "ModelConfig", "ProbabilityMap", "forward_dense", "forward_patch", "init_model",
    "TrainConfig", "TrainReport", "run_experiment", "train_fold",
]
