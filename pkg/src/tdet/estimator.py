"""Scikit-learn style wrapper so the detector composes with the wider
ecosystem: fit on a list of videos, predict detections per frame, score by
average precision."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .data import Video
from .detector import (
    DetectorConfig,
    decode,
    init_base_params,
    nms,
    stream_grids,
    transfer_weights,
)
from .evaluate import EVAL_NMS_IOU, evaluate
from .tensor import ContractError, Tensor
from .trainer import TrainConfig, pretrain_base, train


def _check_videos(X) -> list[Video]:
    if isinstance(X, Video):
        return [X]
    videos = list(X)
    if not videos or not all(isinstance(v, Video) for v in videos):
        raise ValueError("expected a Video or a non-empty sequence of Video")
    return videos


def _check_frames(frames, input_size: int) -> list[np.ndarray]:
    out = []
    for f in frames:
        arr = np.asarray(f, dtype=np.float64)
        if arr.shape != (3, input_size, input_size):
            raise ValueError(f"frame shape {arr.shape} != (3, {input_size}, {input_size})")
        out.append(arr)
    if not out:
        raise ValueError("empty frame sequence")
    return out


class TemporalObjectDetector(BaseEstimator):
    """Single-stage grid detector with a ConvLSTM history encoder.

    fit() optionally pretrains the base network on still frames, transfers
    its weights into the modified architecture (backbone frozen, head widened
    with zero-initialized history channels), then runs the weakly supervised
    sequence training.  predict() returns per-frame detection lists.
    """

    def __init__(self, input_size=64, seq_len=8, epochs=10, learning_rate=1e-3,
                 pretrain_epochs=5, pretrain_steps=None, steps_per_epoch=None,
                 mode="sequenced", conf_threshold=0.5, nms_iou=EVAL_NMS_IOU,
                 seed=0):
        self.input_size = input_size
        self.seq_len = seq_len
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.pretrain_epochs = pretrain_epochs
        self.pretrain_steps = pretrain_steps
        self.steps_per_epoch = steps_per_epoch
        self.mode = mode
        self.conf_threshold = conf_threshold
        self.nms_iou = nms_iou
        self.seed = seed

    def _detector_config(self) -> DetectorConfig:
        return DetectorConfig(input_size=self.input_size)

    def fit(self, X, y=None):
        """X: sequence of Video (annotations travel inside each Video)."""
        videos = _check_videos(X)
        cfg = self._detector_config()
        rng = np.random.default_rng(self.seed)
        base = init_base_params(cfg, rng)
        if self.pretrain_epochs:
            pre_cfg = TrainConfig(seq_len=1, epochs=self.pretrain_epochs,
                                  learning_rate=self.learning_rate,
                                  seed=self.seed,
                                  steps_per_epoch=self.pretrain_steps)
            pretrain_base(videos, pre_cfg, base)
        params = transfer_weights(base, init_seed=self.seed + 1)
        train_cfg = TrainConfig(seq_len=self.seq_len, epochs=self.epochs,
                                learning_rate=self.learning_rate,
                                seed=self.seed,
                                steps_per_epoch=self.steps_per_epoch)
        params, trace = train(videos, train_cfg, params)
        self.model_params_ = params
        self.loss_trace_ = trace
        return self

    def predict(self, X):
        """X: one video's frames (array-likes of shape (3, S, S)).  Returns a
        list of per-frame detection lists in the configured mode."""
        if not hasattr(self, "model_params_"):
            raise ContractError("estimator is not fitted")
        frames = _check_frames(X.frames if isinstance(X, Video) else X, self.input_size)
        params = self.model_params_
        out = []
        tensors = [Tensor(f) for f in frames]
        for t, grid in enumerate(stream_grids(tensors, self.mode, params)):
            dets = decode(grid, self.conf_threshold, params.config, frame_index=t)
            out.append(nms(dets, self.nms_iou))
        return out

    def score(self, X, y=None):
        """Overall average precision of the fitted model on annotated videos."""
        if not hasattr(self, "model_params_"):
            raise ContractError("estimator is not fitted")
        report = evaluate(self.model_params_, _check_videos(X), self.mode)
        return report.ap_all
