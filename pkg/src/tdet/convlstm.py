"""ConvLSTM cell: recurrent encoding of feature-map history across frames.

Peephole-free gate formulation (the commonly deployed variant); gate order is
fixed as input, forget, output, candidate for serialization purposes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .tensor import (
    GradTape,
    ShapeError,
    Tensor,
    add,
    add_channel_bias,
    conv2d,
    mul,
    read_tensor,
    sigmoid,
    tanh,
    write_tensor,
)

GATES = ("i", "f", "o", "g")

# tape nodes appended by one convlstm_step: per gate 2 convs + 1 add + 1 bias
# + 1 activation, then 2 muls + 1 add for c' and tanh + mul for h'
NODES_PER_STEP = 4 * 5 + 3 + 2


@dataclass
class ConvLSTMWeights:
    """Per-gate input kernels W[F,C,k,k], hidden kernels U[F,F,k,k] and biases
    b[F], for gates i, f, o, g (candidate)."""

    w: dict[str, Tensor]
    u: dict[str, Tensor]
    b: dict[str, Tensor]

    @property
    def filters(self) -> int:
        return self.w["i"].shape[0]

    @property
    def in_channels(self) -> int:
        return self.w["i"].shape[1]

    @property
    def kernel_size(self) -> int:
        return self.w["i"].shape[2]

    def tensors(self) -> list[Tensor]:
        out = []
        for g in GATES:
            out.extend([self.w[g], self.u[g], self.b[g]])
        return out

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors():
            t.trainable = flag


@dataclass
class ConvLSTMState:
    """Hidden and cell feature maps [F,H,W], carried across frames."""

    h: Tensor
    c: Tensor

    @staticmethod
    def zeros(filters: int, height: int, width: int) -> "ConvLSTMState":
        return ConvLSTMState(Tensor.zeros((filters, height, width)),
                             Tensor.zeros((filters, height, width)))


def init_weights(in_channels: int, filters: int, kernel_size: int,
                 rng: np.random.Generator) -> ConvLSTMWeights:
    """Uniform [-s, s] with s = 1/sqrt(fan_in); forget-gate bias starts at +1
    as the usual LSTM training stabilizer."""
    if kernel_size % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {kernel_size}")
    k = kernel_size
    w, u, b = {}, {}, {}
    for g in GATES:
        s_in = 1.0 / np.sqrt(in_channels * k * k)
        s_hid = 1.0 / np.sqrt(filters * k * k)
        w[g] = Tensor(rng.uniform(-s_in, s_in, (filters, in_channels, k, k)),
                      trainable=True, name=f"lstm.W_{g}")
        u[g] = Tensor(rng.uniform(-s_hid, s_hid, (filters, filters, k, k)),
                      trainable=True, name=f"lstm.U_{g}")
        bias = np.full(filters, 1.0) if g == "f" else np.zeros(filters)
        b[g] = Tensor(bias, trainable=True, name=f"lstm.b_{g}")
    return ConvLSTMWeights(w, u, b)


def zero_weights(in_channels: int, filters: int, kernel_size: int) -> ConvLSTMWeights:
    k = kernel_size
    w = {g: Tensor.zeros((filters, in_channels, k, k)) for g in GATES}
    u = {g: Tensor.zeros((filters, filters, k, k)) for g in GATES}
    b = {g: Tensor.zeros(filters) for g in GATES}
    return ConvLSTMWeights(w, u, b)


def convlstm_step(x: Tensor, state: ConvLSTMState, weights: ConvLSTMWeights,
                  tape: GradTape | None = None) -> ConvLSTMState:
    """One recurrence step; "same" padding keeps the spatial dims."""
    if x.data.ndim != 3:
        raise ShapeError(f"expected [C,H,W] input, got {x.shape}")
    if x.shape[0] != weights.in_channels:
        raise ShapeError(f"input channels {x.shape[0]} != weight channels {weights.in_channels}")
    if state.h.shape != (weights.filters,) + x.shape[1:]:
        raise ShapeError(f"state {state.h.shape} does not match input {x.shape}")
    pad = (weights.kernel_size - 1) // 2

    def gate(g: str) -> Tensor:
        pre = add(conv2d(x, weights.w[g], 1, pad, tape),
                  conv2d(state.h, weights.u[g], 1, pad, tape), tape)
        pre = add_channel_bias(pre, weights.b[g], tape)
        act = tanh if g == "g" else sigmoid
        return act(pre, tape)

    i, f, o, g = (gate(name) for name in GATES)
    c_new = add(mul(f, state.c, tape), mul(i, g, tape), tape)
    h_new = mul(o, tanh(c_new, tape), tape)
    return ConvLSTMState(h_new, c_new)


def encode_history(features: Sequence[Tensor] | Iterable[Tensor],
                   weights: ConvLSTMWeights,
                   tape: GradTape | None = None,
                   spatial: tuple[int, int] | None = None) -> ConvLSTMState:
    """Fold convlstm_step over feature maps of frames 1..t-1, starting from
    the zero state.  An empty history yields the zero state, which is what
    makes plain-mode inference a special case of sequenced mode."""
    features = list(features)
    if features:
        height, width = features[0].shape[1:]
    elif spatial is not None:
        height, width = spatial
    else:
        raise ShapeError("empty history requires explicit spatial dims")
    state = ConvLSTMState.zeros(weights.filters, height, width)
    for x in features:
        state = convlstm_step(x, state, weights, tape)
    return state


def write_weights(fh: BinaryIO, weights: ConvLSTMWeights) -> None:
    for t in weights.tensors():
        write_tensor(fh, t)


def read_weights(fh: BinaryIO, trainable: bool = True) -> ConvLSTMWeights:
    w, u, b = {}, {}, {}
    for g in GATES:
        w[g] = read_tensor(fh)
        u[g] = read_tensor(fh)
        b[g] = read_tensor(fh)
        for t, label in ((w[g], "W"), (u[g], "U"), (b[g], "b")):
            t.trainable = trainable
            t.name = f"lstm.{label}_{g}"
    return ConvLSTMWeights(w, u, b)
