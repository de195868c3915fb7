"""tdet: temporal modification of single-stage object detectors.

A ConvLSTM cell encodes feature-map history across video frames; its output
is concatenated with current-frame features ahead of the prediction layer.
Includes weakly supervised sequence training, a synthetic occlusion benchmark
generator, MOT ground-truth ingestion, and visibility-split evaluation.
"""

from .boxes import BBox, Detection, iou
from .convlstm import ConvLSTMState, ConvLSTMWeights, convlstm_step, encode_history
from .data import (
    GroundTruth,
    SyntheticSceneConfig,
    Video,
    generate_dataset,
    generate_video,
    hidden_fraction,
    load_dataset,
    parse_mot_gt,
    save_dataset,
    split_train_test,
)
from .detector import (
    DetectorConfig,
    ModelParams,
    backbone_features,
    decode,
    forward,
    init_base_params,
    load_checkpoint,
    nms,
    save_checkpoint,
    transfer_weights,
)
from .estimator import TemporalObjectDetector
from .evaluate import EvalReport, evaluate, interpolated_ap, match_detections, pr_curve
from .tensor import GradTape, Tensor, backward, grad_check
from .trainer import TrainConfig, detection_loss, pretrain_base, sample_sequence, train

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "Detection",
    "iou",
    "ConvLSTMState",
    "ConvLSTMWeights",
    "convlstm_step",
    "encode_history",
    "GroundTruth",
    "SyntheticSceneConfig",
    "Video",
    "generate_dataset",
    "generate_video",
    "hidden_fraction",
    "load_dataset",
    "parse_mot_gt",
    "save_dataset",
    "split_train_test",
    "DetectorConfig",
    "ModelParams",
    "backbone_features",
    "decode",
    "forward",
    "init_base_params",
    "load_checkpoint",
    "nms",
    "save_checkpoint",
    "transfer_weights",
    "TemporalObjectDetector",
    "EvalReport",
    "evaluate",
    "interpolated_ap",
    "match_detections",
    "pr_curve",
    "GradTape",
    "Tensor",
    "backward",
    "grad_check",
    "TrainConfig",
    "detection_loss",
    "pretrain_base",
    "sample_sequence",
    "train",
    "__version__",
]
