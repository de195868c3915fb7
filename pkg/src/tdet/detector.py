"""Toy single-stage grid detector plus the temporal modification: ConvLSTM
history encoding concatenated with current-frame features ahead of the 1x1
prediction layer.

One detection scale, one anchor, objectness only.  The per-scale ConvLSTM is
stored as a list so configs can express more scales later; default is one.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from . import convlstm as cl
from .boxes import BBox, Detection, iou
from .tensor import (
    ContractError,
    GradTape,
    ShapeError,
    Tensor,
    add,
    add_channel_bias,
    conv2d,
    leaky_relu,
    read_tensor,
    slice_in_channels,
    write_tensor,
)

CHECKPOINT_MAGIC = b"TDET1"

# head channels per anchor: tx, ty, tw, th, objectness
HEAD_FIELDS = 5


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int = 64
    backbone_channels: tuple[int, ...] = (8, 16, 32, 32)
    backbone_kernel: int = 3
    anchor: tuple[float, float] = (24.0, 24.0)
    lstm_kernel: int = 3

    @property
    def grid_size(self) -> int:
        return self.input_size // (2 ** len(self.backbone_channels))

    @property
    def stride_px(self) -> int:
        return self.input_size // self.grid_size

    @property
    def feature_channels(self) -> int:
        return self.backbone_channels[-1]

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "backbone_channels": list(self.backbone_channels),
            "backbone_kernel": self.backbone_kernel,
            "anchor": list(self.anchor),
            "lstm_kernel": self.lstm_kernel,
        }

    @staticmethod
    def from_dict(d: dict) -> "DetectorConfig":
        return DetectorConfig(
            input_size=int(d["input_size"]),
            backbone_channels=tuple(int(c) for c in d["backbone_channels"]),
            backbone_kernel=int(d["backbone_kernel"]),
            anchor=(float(d["anchor"][0]), float(d["anchor"][1])),
            lstm_kernel=int(d["lstm_kernel"]),
        )


@dataclass
class ConvLayer:
    kernels: Tensor
    bias: Tensor
    frozen: bool = False

    def set_trainable(self, flag: bool) -> None:
        self.kernels.trainable = flag
        self.bias.trainable = flag


@dataclass
class ModelParams:
    config: DetectorConfig
    backbone: list[ConvLayer]
    head_kernel: Tensor  # [5, C] base or [5, 2C] modified, 1x1 spatial
    head_bias: Tensor
    convlstm: list[cl.ConvLSTMWeights] = field(default_factory=list)

    @property
    def is_modified(self) -> bool:
        return bool(self.convlstm)

    def validate(self) -> None:
        c = self.config.feature_channels
        expect = 2 * c if self.is_modified else c
        if self.head_kernel.shape != (HEAD_FIELDS, expect, 1, 1):
            raise ShapeError(
                f"head kernel {self.head_kernel.shape} != expected "
                f"({HEAD_FIELDS}, {expect}, 1, 1); head input must be "
                f"{'2x' if self.is_modified else ''}the encoded layer width")
        for w in self.convlstm:
            if w.filters != c or w.in_channels != c:
                raise ShapeError(f"convlstm filters {w.filters} != encoded channels {c}")

    def trainable_tensors(self) -> list[Tensor]:
        out = []
        for layer in self.backbone:
            if not layer.frozen:
                out.extend([layer.kernels, layer.bias])
        for w in self.convlstm:
            out.extend(w.tensors())
        out.extend([self.head_kernel, self.head_bias])
        return out


def init_base_params(config: DetectorConfig, rng: np.random.Generator) -> ModelParams:
    """Random base (unmodified) network: stride-2 conv stack + 1x1 head."""
    k = config.backbone_kernel
    layers = []
    cin = 3
    for cout in config.backbone_channels:
        s = 1.0 / np.sqrt(cin * k * k)
        layers.append(ConvLayer(
            Tensor(rng.uniform(-s, s, (cout, cin, k, k)), trainable=True),
            Tensor(np.zeros(cout), trainable=True)))
        cin = cout
    c = config.feature_channels
    s = 1.0 / np.sqrt(c)
    head_k = Tensor(rng.uniform(-s, s, (HEAD_FIELDS, c, 1, 1)), trainable=True)
    head_b = Tensor(np.zeros(HEAD_FIELDS), trainable=True)
    params = ModelParams(config, layers, head_k, head_b)
    params.validate()
    return params


def transfer_weights(base: ModelParams, init_seed: int) -> ModelParams:
    """Turn a base network into the modified one: backbone copied verbatim and
    frozen, head widened from C to 2C input channels with the new channels
    zero so the modified network initially reproduces the base outputs, and a
    freshly initialized ConvLSTM."""
    if base.is_modified:
        raise ContractError("transfer_weights expects an unmodified base network")
    base.validate()
    cfg = base.config
    c = cfg.feature_channels
    layers = [ConvLayer(Tensor(l.kernels.data.copy()), Tensor(l.bias.data.copy()),
                        frozen=True) for l in base.backbone]
    head_k = np.zeros((HEAD_FIELDS, 2 * c, 1, 1))
    head_k[:, :c] = base.head_kernel.data
    rng = np.random.default_rng(init_seed)
    lstm = cl.init_weights(c, c, cfg.lstm_kernel, rng)
    params = ModelParams(
        cfg, layers,
        Tensor(head_k, trainable=True, name="head.kernel"),
        Tensor(base.head_bias.data.copy(), trainable=True, name="head.bias"),
        [lstm])
    params.validate()
    return params


def backbone_features(frame: Tensor, params: ModelParams,
                      tape: GradTape | None = None) -> Tensor:
    """Feed-forward conv stack; the tape is ignored for frozen layers so no
    gradient structure is recorded for them."""
    size = params.config.input_size
    if frame.shape != (3, size, size):
        raise ShapeError(f"expected frame (3, {size}, {size}), got {frame.shape}")
    pad = (params.config.backbone_kernel - 1) // 2
    x = frame
    for layer in params.backbone:
        layer_tape = None if layer.frozen else tape
        x = conv2d(x, layer.kernels, 2, pad, layer_tape)
        x = add_channel_bias(x, layer.bias, layer_tape)
        x = leaky_relu(x, 0.1, layer_tape)
    return x


def _head(features: Tensor, history: Tensor | None, params: ModelParams,
          tape: GradTape | None) -> Tensor:
    c = params.config.feature_channels
    if history is None:
        out = conv2d(features, params.head_kernel, 1, 0, tape)
    else:
        # concat(features, h) into the 1x1 layer, computed as a split sum so
        # zero history weights contribute exact zeros (transfer neutrality)
        k_cur = slice_in_channels(params.head_kernel, 0, c, tape)
        k_hist = slice_in_channels(params.head_kernel, c, 2 * c, tape)
        out = add(conv2d(features, k_cur, 1, 0, tape),
                  conv2d(history, k_hist, 1, 0, tape), tape)
    return add_channel_bias(out, params.head_bias, tape)


def forward(frames: Sequence[Tensor], mode: str, params: ModelParams,
            tape: GradTape | None = None) -> Tensor:
    """Prediction grid for the LAST frame.  Plain mode forces the history
    encoding to the zero state; sequenced mode folds the ConvLSTM over the
    backbone features of all earlier frames."""
    if not frames:
        raise ContractError("forward requires a non-empty frame sequence")
    if mode not in ("plain", "sequenced"):
        raise ContractError(f"unknown mode {mode!r}")
    params.validate()
    if not params.is_modified:
        feats = backbone_features(frames[-1], params, tape)
        return _head(feats, None, params, tape)
    if mode == "plain":
        return forward([frames[-1]], "sequenced", params, tape)
    lstm = params.convlstm[0]
    history_feats = [backbone_features(f, params, tape) for f in frames[:-1]]
    s = params.config.grid_size
    state = cl.encode_history(history_feats, lstm, tape, spatial=(s, s))
    current = backbone_features(frames[-1], params, tape)
    return _head(current, state.h, params, tape)


def stream_grids(frames: Sequence[Tensor], mode: str, params: ModelParams):
    """Yield the prediction grid for every frame in order, threading the
    recurrent state incrementally.  Sequenced mode performs the same fold as
    forward() but in O(T) total work for a T-frame video."""
    if mode not in ("plain", "sequenced"):
        raise ContractError(f"unknown mode {mode!r}")
    params.validate()
    if not params.is_modified:
        for f in frames:
            yield _head(backbone_features(f, params), None, params, None)
        return
    lstm = params.convlstm[0]
    s = params.config.grid_size
    state = cl.ConvLSTMState.zeros(lstm.filters, s, s)
    zero = cl.ConvLSTMState.zeros(lstm.filters, s, s)
    for f in frames:
        feats = backbone_features(f, params)
        h = state.h if mode == "sequenced" else zero.h
        yield _head(feats, h, params, None)
        if mode == "sequenced":
            state = cl.convlstm_step(feats, state, lstm)


def expected_forward_tape_nodes(history_len: int) -> int:
    """Tape nodes recorded by a frozen-backbone sequenced forward: ConvLSTM
    steps plus the split head (2 slices, 2 convs, add, bias)."""
    return cl.NODES_PER_STEP * history_len + 6


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def decode(grid: Tensor | np.ndarray, conf_threshold: float,
           config: DetectorConfig, frame_index: int = 0) -> list[Detection]:
    """Grid cells to pixel boxes, cell-major order; keeps conf >= threshold."""
    g = grid.data if isinstance(grid, Tensor) else np.asarray(grid)
    s = config.grid_size
    if g.shape != (HEAD_FIELDS, s, s):
        raise ShapeError(f"grid {g.shape} != ({HEAD_FIELDS}, {s}, {s})")
    stride = config.stride_px
    aw, ah = config.anchor
    dets = []
    for i in range(s):
        for j in range(s):
            conf = float(_sigmoid(g[4, i, j]))
            if conf < conf_threshold:
                continue
            cx = (j + float(_sigmoid(g[0, i, j]))) * stride
            cy = (i + float(_sigmoid(g[1, i, j]))) * stride
            w = aw * float(np.exp(g[2, i, j]))
            h = ah * float(np.exp(g[3, i, j]))
            dets.append(Detection(BBox(cx - w / 2, cy - h / 2, w, h), conf, frame_index))
    return dets


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy suppression.  Confidence ties order by frame then top-left
    position (the lower grid cell for decoded boxes), making the result
    independent of input ordering."""
    ordered = sorted(dets, key=lambda d: (-d.confidence, d.frame_index,
                                          d.box.y, d.box.x, d.box.w, d.box.h))
    kept: list[Detection] = []
    for d in ordered:
        if all(iou(d.box, k.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


# ---------------------------------------------------------------------------
# checkpoint io: magic, u32-length JSON config block, tensors in fixed order


def save_checkpoint(path, params: ModelParams) -> None:
    params.validate()
    meta = {
        "config": params.config.to_dict(),
        "scales": len(params.convlstm),
        "frozen": [layer.frozen for layer in params.backbone],
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for layer in params.backbone:
            write_tensor(fh, layer.kernels)
            write_tensor(fh, layer.bias)
        for w in params.convlstm:
            cl.write_weights(fh, w)
        write_tensor(fh, params.head_kernel)
        write_tensor(fh, params.head_bias)


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ContractError(f"not a checkpoint file: bad magic {magic!r}")
        (n,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(n))
        config = DetectorConfig.from_dict(meta["config"])
        layers = []
        for frozen in meta["frozen"]:
            kern = read_tensor(fh)
            bias = read_tensor(fh)
            kern.trainable = bias.trainable = not frozen
            layers.append(ConvLayer(kern, bias, frozen=bool(frozen)))
        lstm = [cl.read_weights(fh) for _ in range(meta["scales"])]
        head_k = read_tensor(fh)
        head_b = read_tensor(fh)
        head_k.trainable = head_b.trainable = True
    params = ModelParams(config, layers, head_k, head_b, lstm)
    params.validate()
    return params
