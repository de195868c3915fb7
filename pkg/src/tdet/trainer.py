"""Weakly supervised sequence training.

Each step supervises a single randomly positioned annotated frame of a
sequence window: frames after it are not fed forward, backbone features are
computed without recording gradient structure (the backbone is frozen), and
backpropagation through time covers only the ConvLSTM and the prediction
head.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import BBox
from .data import GroundTruth, Video
from .detector import (
    DetectorConfig,
    HEAD_FIELDS,
    ModelParams,
    backbone_features,
    forward,
    save_checkpoint,
)
from .tensor import ContractError, GradTape, Tensor, backward, write_tensor

LAMBDA_COORD = 5.0
LAMBDA_NOOBJ = 0.5
IGNORE_IOU = 0.7


class SampleRejected(Exception):
    """No annotated frame in the drawn window; caller resamples."""


class TrainingDiverged(RuntimeError):
    """Three consecutive non-finite losses."""


@dataclass
class TrainConfig:
    seq_len: int = 8
    epochs: int = 10
    learning_rate: float = 1e-3
    seed: int = 0
    steps_per_epoch: int | None = None
    hflip: bool = False

    def validate(self) -> None:
        if self.seq_len < 1 or self.epochs < 1:
            raise ContractError("seq_len and epochs must be >= 1")

    def to_dict(self) -> dict:
        return {
            "seq_len": self.seq_len,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "steps_per_epoch": self.steps_per_epoch,
            "hflip": self.hflip,
        }


@dataclass
class TrainingSample:
    frames: list[np.ndarray]
    supervised_index: int
    gt: list[GroundTruth]


def sample_sequence(video: Video, annotations: Sequence[GroundTruth] | None,
                    seq_len: int, rng: np.random.Generator) -> TrainingSample:
    """Uniform window of seq_len frames, supervised index uniform among the
    annotated positions inside the window."""
    gts = list(annotations) if annotations is not None else video.gt
    n = video.num_frames
    if n < seq_len:
        raise ContractError(f"video has {n} frames, need >= {seq_len}")
    start = int(rng.integers(0, n - seq_len + 1))
    by_frame: dict[int, list[GroundTruth]] = {}
    for g in gts:
        by_frame.setdefault(g.frame_index, []).append(g)
    annotated = [s for s in range(seq_len) if start + s in by_frame]
    if not annotated:
        raise SampleRejected(f"window [{start}, {start + seq_len}) has no annotations")
    s = annotated[int(rng.integers(0, len(annotated)))]
    return TrainingSample(video.frames[start : start + seq_len], s, by_frame[start + s])


def _sigmoid(z: np.ndarray | float):
    return np.where(np.asarray(z) >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def _softplus(z: np.ndarray | float):
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def detection_loss(grid: Tensor, gts: Sequence[GroundTruth], config: DetectorConfig,
                   tape: GradTape | None = None,
                   stats: dict | None = None) -> Tensor:
    """YOLO-style composite loss for a single anchor-free-of-classes grid.

    The responsible cell (containing a gt center) gets squared error on the
    sigmoided center offsets and the log size ratios plus objectness BCE with
    target 1; every other cell gets weighted objectness BCE with target 0
    unless its decoded box overlaps some gt above the ignore IoU.  Recorded
    as one fused tape node with an analytic gradient."""
    g = grid.data
    s = config.grid_size
    if g.shape != (HEAD_FIELDS, s, s):
        raise ContractError(f"grid {g.shape} != ({HEAD_FIELDS}, {s}, {s})")
    stride = config.stride_px
    aw, ah = config.anchor

    responsible: dict[tuple[int, int], tuple[float, float, float, float]] = {}
    skipped = 0
    for gt in gts:
        b = gt.box
        cx, cy = b.x + b.w / 2.0, b.y + b.h / 2.0
        if not (0 <= cx <= config.input_size and 0 <= cy <= config.input_size):
            raise ContractError(f"gt center ({cx}, {cy}) outside image bounds")
        j = min(int(cx // stride), s - 1)
        i = min(int(cy // stride), s - 1)
        if (i, j) in responsible:
            skipped += 1
            continue
        responsible[(i, j)] = (cx / stride - j, cy / stride - i,
                               math.log(b.w / aw), math.log(b.h / ah))
    if stats is not None:
        stats["skipped_gt"] = skipped

    # ignore mask from the grid's own decoded boxes (treated as constant)
    ignore = np.zeros((s, s), dtype=bool)
    if gts:
        sx = _sigmoid(g[0])
        sy = _sigmoid(g[1])
        jj, ii = np.meshgrid(np.arange(s), np.arange(s))
        dcx = (jj + sx) * stride
        dcy = (ii + sy) * stride
        dw = aw * np.exp(g[2])
        dh = ah * np.exp(g[3])
        for gt in gts:
            b = gt.box
            iw = np.minimum(dcx + dw / 2, b.x + b.w) - np.maximum(dcx - dw / 2, b.x)
            ih = np.minimum(dcy + dh / 2, b.y + b.h) - np.maximum(dcy - dh / 2, b.y)
            inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
            union = dw * dh + b.w * b.h - inter
            ignore |= inter / union > IGNORE_IOU

    loss = 0.0
    dg = np.zeros_like(g)
    z = g[4]
    sig_z = _sigmoid(z)
    obj_mask = np.zeros((s, s), dtype=bool)
    for (i, j), (fx, fy, twt, tht) in responsible.items():
        obj_mask[i, j] = True
        px, py = float(_sigmoid(g[0, i, j])), float(_sigmoid(g[1, i, j]))
        loss += LAMBDA_COORD * ((px - fx) ** 2 + (py - fy) ** 2)
        dg[0, i, j] += LAMBDA_COORD * 2.0 * (px - fx) * px * (1.0 - px)
        dg[1, i, j] += LAMBDA_COORD * 2.0 * (py - fy) * py * (1.0 - py)
        loss += LAMBDA_COORD * ((g[2, i, j] - twt) ** 2 + (g[3, i, j] - tht) ** 2)
        dg[2, i, j] += LAMBDA_COORD * 2.0 * (g[2, i, j] - twt)
        dg[3, i, j] += LAMBDA_COORD * 2.0 * (g[3, i, j] - tht)
        loss += float(_softplus(-z[i, j]))  # BCE, target 1
        dg[4, i, j] += sig_z[i, j] - 1.0

    noobj = ~obj_mask & ~ignore
    loss += LAMBDA_NOOBJ * float(_softplus(z[noobj]).sum())  # BCE, target 0
    dg[4][noobj] += LAMBDA_NOOBJ * sig_z[noobj]

    out = Tensor(np.float64(loss))
    if tape is not None:
        tape.record(out, (grid,), lambda gout: (float(gout) * dg,))
    return out


class Adam:
    """Adam with bias correction; state keyed by parameter tensor identity."""

    def __init__(self, params: Sequence[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for p in self.params}
        self.t = 0

    def step(self, grads: dict[Tensor, Tensor]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = grads.get(p)
            if g is None:
                continue
            m = self.m[id(p)]
            v = self.v[id(p)]
            m *= self.beta1
            m += (1.0 - self.beta1) * g.data
            v *= self.beta2
            v += (1.0 - self.beta2) * g.data * g.data
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def hflip_sample(sample: TrainingSample, image_size: int) -> TrainingSample:
    frames = [np.ascontiguousarray(f[:, :, ::-1]) for f in sample.frames]
    gt = [GroundTruth(g.frame_index, g.track_id,
                      BBox(image_size - g.box.x - g.box.w, g.box.y, g.box.w, g.box.h),
                      g.visibility, g.class_id) for g in sample.gt]
    return TrainingSample(frames, sample.supervised_index, gt)


def train_step(params: ModelParams, sample: TrainingSample, adam: Adam,
               stats: dict | None = None) -> tuple[float, int]:
    """One weakly supervised step: sequenced forward over frames 0..s, loss on
    frame s, BPTT through ConvLSTM + head only.  Returns the loss value and
    the number of recorded tape nodes (the memory invariant)."""
    tape = GradTape()
    frames = [Tensor(f) for f in sample.frames[: sample.supervised_index + 1]]
    grid = forward(frames, "sequenced", params, tape)
    loss = detection_loss(grid, sample.gt, params.config, tape, stats)
    value = float(loss.data)
    node_count = tape.node_count
    if math.isfinite(value):
        grads = backward(tape, loss)
        adam.step(grads)
    return value, node_count


def expected_train_tape_nodes(history_len: int) -> int:
    """Frozen-backbone step: forward nodes plus the fused loss node."""
    from .detector import expected_forward_tape_nodes

    return expected_forward_tape_nodes(history_len) + 1


def backbone_checksum(params: ModelParams) -> str:
    digest = hashlib.sha256()
    for layer in params.backbone:
        digest.update(layer.kernels.data.tobytes())
        digest.update(layer.bias.data.tobytes())
    return digest.hexdigest()


def train(dataset: Sequence[Video], config: TrainConfig, params: ModelParams,
          out_dir=None) -> tuple[ModelParams, list[tuple[int, int, float]]]:
    """Adam training of the ConvLSTM and head; the frozen backbone is never
    recorded and is bit-unchanged afterwards.  Returns params (updated in
    place) and the (epoch, step, loss) trace."""
    config.validate()
    if not params.is_modified:
        raise ContractError("train expects params produced by transfer_weights")
    if not all(layer.frozen for layer in params.backbone):
        raise ContractError("backbone must be frozen for sequence training")
    rng = np.random.default_rng(config.seed)
    adam = Adam(params.trainable_tensors(), config.learning_rate)
    steps = config.steps_per_epoch or max(
        1, sum(max(1, v.num_frames // config.seq_len) for v in dataset))

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "train_config.json", "w") as fh:
            json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    trace: list[tuple[int, int, float]] = []
    bad_streak = 0
    for epoch in range(config.epochs):
        for step in range(steps):
            sample = None
            for _ in range(100):
                video = dataset[int(rng.integers(0, len(dataset)))]
                try:
                    sample = sample_sequence(video, None, config.seq_len, rng)
                    break
                except SampleRejected:
                    continue
            if sample is None:
                raise ContractError("no annotated window found in 100 draws")
            if config.hflip and rng.uniform() < 0.5:
                sample = hflip_sample(sample, params.config.input_size)
            value, _ = train_step(params, sample, adam)
            if not math.isfinite(value):
                bad_streak += 1
                if bad_streak >= 3:
                    raise TrainingDiverged(
                        f"3 consecutive non-finite losses at epoch {epoch} step {step}")
                continue
            bad_streak = 0
            trace.append((epoch, step, value))
        if out is not None:
            save_checkpoint(out / f"epoch_{epoch:03d}.ckpt", params)
    if out is not None:
        save_checkpoint(out / "final.ckpt", params)
        write_loss_trace(trace, out / "loss.csv")
    return params, trace


def write_loss_trace(trace: Sequence[tuple[int, int, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "loss"])
        for epoch, step, value in trace:
            writer.writerow([epoch, step, repr(value)])


def pretrain_base(dataset: Sequence[Video], config: TrainConfig,
                  params: ModelParams, min_visibility: float = 0.5
                  ) -> tuple[ModelParams, list[tuple[int, int, float]]]:
    """Still-image training of an unmodified base network (all layers
    trainable), the desk-scale stand-in for a pretrained base detector.
    Frames whose annotations are all below min_visibility are skipped."""
    config.validate()
    if params.is_modified:
        raise ContractError("pretrain_base expects an unmodified network")
    for layer in params.backbone:
        layer.set_trainable(True)
        layer.frozen = False
    rng = np.random.default_rng(config.seed)
    adam = Adam(params.trainable_tensors(), config.learning_rate)
    steps = config.steps_per_epoch or max(1, sum(v.num_frames for v in dataset) // 2)

    trace: list[tuple[int, int, float]] = []
    bad_streak = 0
    for epoch in range(config.epochs):
        for step in range(steps):
            chosen = None
            for _ in range(100):
                video = dataset[int(rng.integers(0, len(dataset)))]
                t = int(rng.integers(0, video.num_frames))
                gts = [g for g in video.gt_for_frame(t) if g.visibility >= min_visibility]
                if gts:
                    chosen = (video.frames[t], gts)
                    break
            if chosen is None:
                raise ContractError("no sufficiently visible annotated frame found")
            frame, gts = chosen
            if config.hflip and rng.uniform() < 0.5:
                flipped = hflip_sample(TrainingSample([frame], 0, gts),
                                       params.config.input_size)
                frame, gts = flipped.frames[0], flipped.gt
            tape = GradTape()
            grid = forward([Tensor(frame)], "plain", params, tape)
            loss = detection_loss(grid, gts, params.config, tape)
            value = float(loss.data)
            if not math.isfinite(value):
                bad_streak += 1
                if bad_streak >= 3:
                    raise TrainingDiverged(
                        f"3 consecutive non-finite losses at epoch {epoch} step {step}")
                continue
            bad_streak = 0
            adam.step(backward(tape, loss))
            trace.append((epoch, step, value))
    return params, trace
