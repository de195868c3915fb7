"""Minimal dense tensor core with tape-based reverse-mode differentiation.

All arrays are 64-bit floats in row-major order.  Operations take an optional
``tape``; when it is None no gradient structure is recorded, which is how
frozen parts of a network stay out of memory during backpropagation through
time.  Convolution uses the cross-correlation convention (no kernel flip).
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "ContractError",
    "conv2d",
    "sigmoid",
    "tanh",
    "leaky_relu",
    "add",
    "mul",
    "add_channel_bias",
    "concat_channels",
    "slice_channels",
    "slice_in_channels",
    "tensor_sum",
    "backward",
    "grad_check",
    "write_tensor",
    "read_tensor",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when an operation's preconditions are violated."""


class Tensor:
    """Dense N-dimensional float64 array, immutable by convention after
    construction (the trainer mutates ``data`` in place between steps, which
    is outside any recorded tape's lifetime).
    """

    __slots__ = ("data", "trainable", "name")

    def __init__(self, data, trainable: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64, order="C")
        self.data = arr
        self.trainable = trainable
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        flag = " trainable" if self.trainable else ""
        return f"<Tensor{label} shape={self.shape}{flag}>"

    @staticmethod
    def zeros(shape, trainable: bool = False, name: str | None = None) -> "Tensor":
        return Tensor(np.zeros(shape), trainable=trainable, name=name)


class GradTape:
    """Recorded forward operations, in execution (topological) order."""

    def __init__(self):
        # node: (output Tensor, input Tensors, backward fn)
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], bwd: Callable) -> None:
        self._nodes.append((out, inputs, bwd))

    @property
    def node_count(self) -> int:
        return len(self._nodes)

    def nodes(self):
        return self._nodes


def _record(tape: GradTape | None, out: Tensor, inputs, bwd) -> Tensor:
    if tape is not None:
        tape.record(out, tuple(inputs), bwd)
    return out


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(c * kh * kw, oh * ow)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0,
           tape: GradTape | None = None) -> Tensor:
    """2-D cross-correlation of a [C,H,W] input with [F,C,kh,kw] kernels."""
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d expects [C,H,W] x [F,C,kh,kw], got {x.shape} x {kernels.shape}")
    cin, h, w = x.shape
    f, kc, kh, kw = kernels.shape
    if kc != cin:
        raise ShapeError(f"kernel input channels {kc} != input channels {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel dims must be odd, got {kh}x{kw}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"input {h}x{w} with padding {padding} smaller than kernel {kh}x{kw}")
    if stride < 1:
        raise ContractError(f"stride must be positive, got {stride}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    kmat = kernels.data.reshape(f, cin * kh * kw)
    out = Tensor((kmat @ cols).reshape(f, oh, ow))

    def bwd(gout: np.ndarray):
        gflat = gout.reshape(f, oh * ow)
        gk = (gflat @ cols.T).reshape(kernels.shape)
        gcols = (kmat.T @ gflat).reshape(cin, kh, kw, oh, ow)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[:, i, j]
        gx = gxp[:, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gk

    return _record(tape, out, (x, kernels), bwd)


# ---------------------------------------------------------------------------
# elementwise


def sigmoid(x: Tensor, tape: GradTape | None = None) -> Tensor:
    y = _sigmoid_np(x.data)
    out = Tensor(y)
    return _record(tape, out, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def tanh(x: Tensor, tape: GradTape | None = None) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    return _record(tape, out, (x,), lambda g: (g * (1.0 - y * y),))


def leaky_relu(x: Tensor, alpha: float = 0.1, tape: GradTape | None = None) -> Tensor:
    y = np.where(x.data > 0, x.data, alpha * x.data)
    slope = np.where(x.data > 0, 1.0, alpha)
    out = Tensor(y)
    return _record(tape, out, (x,), lambda g: (g * slope,))


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(tape, out, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    return _record(tape, out, (a, b), lambda g: (g * b.data, g * a.data))


def add_channel_bias(x: Tensor, bias: Tensor, tape: GradTape | None = None) -> Tensor:
    """Add a per-channel bias [C] to a [C,H,W] map."""
    if bias.data.ndim != 1 or x.data.ndim != 3 or bias.shape[0] != x.shape[0]:
        raise ShapeError(f"bias {bias.shape} does not match map {x.shape}")
    out = Tensor(x.data + bias.data[:, None, None])
    return _record(tape, out, (x, bias), lambda g: (g, g.sum(axis=(1, 2))))


# ---------------------------------------------------------------------------
# channel plumbing


def concat_channels(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels: spatial mismatch {a.shape} vs {b.shape}")
    c1 = a.shape[0]
    out = Tensor(np.concatenate([a.data, b.data], axis=0))
    return _record(tape, out, (a, b), lambda g: (g[:c1], g[c1:]))


def slice_channels(x: Tensor, start: int, stop: int, tape: GradTape | None = None) -> Tensor:
    if x.data.ndim != 3 or not (0 <= start <= stop <= x.shape[0]):
        raise ShapeError(f"slice_channels [{start}:{stop}] invalid for {x.shape}")
    out = Tensor(x.data[start:stop])

    def bwd(g: np.ndarray):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _record(tape, out, (x,), bwd)


def slice_in_channels(k: Tensor, start: int, stop: int,
                      tape: GradTape | None = None) -> Tensor:
    """Slice a [F,C,kh,kw] kernel stack along its input-channel axis."""
    if k.data.ndim != 4 or not (0 <= start <= stop <= k.shape[1]):
        raise ShapeError(f"slice_in_channels [{start}:{stop}] invalid for {k.shape}")
    out = Tensor(k.data[:, start:stop])

    def bwd(g: np.ndarray):
        gk = np.zeros_like(k.data)
        gk[:, start:stop] = g
        return (gk,)

    return _record(tape, out, (k,), bwd)


def tensor_sum(x: Tensor, tape: GradTape | None = None) -> Tensor:
    out = Tensor(x.data.sum())
    return _record(tape, out, (x,), lambda g: (np.full(x.shape, float(g)),))


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: GradTape, loss: Tensor) -> dict[Tensor, Tensor]:
    """Reverse the tape from a scalar loss; returns gradients for every
    trainable tensor reached.  Tensors recorded on the tape are visited once,
    after all their consumers."""
    if loss.data.ndim != 0:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.array(1.0)}
    trainables: dict[int, Tensor] = {}
    for out, inputs, bwd in reversed(tape.nodes()):
        gout = grads.pop(id(out), None)
        if gout is None:
            continue
        gins = bwd(gout)
        for tin, gin in zip(inputs, gins):
            if gin is None:
                continue
            acc = grads.get(id(tin))
            grads[id(tin)] = gin if acc is None else acc + gin
            if tin.trainable:
                trainables[id(tin)] = tin
    return {t: Tensor(grads[i]) for i, t in trainables.items()}


def grad_check(f: Callable[[Tensor, GradTape], Tensor], x: Tensor,
               eps: float = 1e-5) -> float:
    """Max relative error between tape gradients of f at x and central finite
    differences.  f must build its graph on the tape it is handed and return a
    scalar Tensor."""
    probe = Tensor(x.data.copy(), trainable=True)
    tape = GradTape()
    loss = f(probe, tape)
    analytic = backward(tape, loss)[probe].data

    numeric = np.zeros_like(probe.data)
    flat = probe.data.ravel()
    nflat = numeric.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(f(probe, GradTape()).data)
        flat[i] = orig - eps
        down = float(f(probe, GradTape()).data)
        flat[i] = orig
        nflat[i] = (up - down) / (2.0 * eps)

    denom = np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0


# ---------------------------------------------------------------------------
# serialization: little-endian u32 rank, u32 dims, f64 row-major payload


def write_tensor(fh: BinaryIO, t: Tensor | np.ndarray) -> None:
    arr = t.data if isinstance(t, Tensor) else np.ascontiguousarray(t, dtype=np.float64)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype("<f8").tobytes())


def read_tensor(fh: BinaryIO) -> Tensor:
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ContractError("truncated tensor payload")
    data = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return Tensor(data)
