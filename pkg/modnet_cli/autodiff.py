"""MODNet CLI — Tape-based reverse-mode differentiation over dense float64 arrays.

Every op takes and returns :class:`Tensor` objects bound to one :class:`Tape`.
The tape records, per op, the ids of its inputs and output and a closure that
maps the output gradient to input gradients. ``Tape.backward`` walks the
records in exact reverse order and accumulates into :class:`Parameter.grad`.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, softmax

from modnet_cli.error_reporter import AutodiffError, NonFiniteError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ACTIVATIONS = ("relu", "sigmoid", "tanh")
COMBINE_KINDS = ("concat_lastaxis", "elementwise_mul")


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    trainable: bool = True
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


@dataclass
class BatchNormState:
    running_mean: Parameter
    running_var: Parameter
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS


class Tensor:
    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data: np.ndarray, tape: "Tape", node_id: int):
        self.data = data
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, id={self.node_id})"


@dataclass
class TapeNode:
    op: str
    inputs: Tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Append-only op record. ``record=False`` keeps no backward closures."""

    record: bool = True
    nodes: List[TapeNode] = field(default_factory=list)
    _next_id: int = 0
    _params: Dict[int, Parameter] = field(default_factory=dict)
    _watched: Dict[int, Tensor] = field(default_factory=dict)

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def constant(self, array) -> Tensor:
        return Tensor(np.asarray(array, dtype=np.float64), self, self._new_id())

    def watch(self, param: Parameter) -> Tensor:
        """Leaf tensor for a parameter; repeated calls return the same leaf."""
        key = id(param)
        if key not in self._watched:
            t = Tensor(param.value, self, self._new_id())
            self._watched[key] = t
            self._params[t.node_id] = param
        return self._watched[key]

    def emit(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, backward) -> Tensor:
        for t in inputs:
            if t.tape is not self:
                raise AutodiffError(f"{op}: input belongs to a different tape")
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(op)
        t = Tensor(out, self, self._new_id())
        if self.record:
            self.nodes.append(TapeNode(op, tuple(x.node_id for x in inputs), t.node_id, backward))
        return t

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.record:
            raise AutodiffError("tape was created with record=False")
        grads = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.output, None)
            if g is None:
                continue
            for input_id, gi in zip(node.inputs, node.backward(g)):
                if gi is None:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + gi
                else:
                    grads[input_id] = gi
        for node_id, param in self._params.items():
            if param.trainable and node_id in grads:
                param.grad = param.grad + grads[node_id]


def _shape_error(op, *shapes):
    listed = " vs ".join(str(tuple(s)) for s in shapes)
    return AutodiffError(f"{op}: shape mismatch {listed}")


# ── Layers ───────────────────────────────────────────────

def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """y = x W + b for x [batch, in], W [in, out], b [out]."""
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1 \
            or x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise _shape_error("linear", x.shape, W.shape, b.shape)
    xd, Wd = x.data, W.data
    out = xd @ Wd + b.data

    def backward(g):
        return g @ Wd.T, xd.T @ g, g.sum(axis=0)

    return x.tape.emit("linear", (x, W, b), out, backward)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise _shape_error("batchnorm", x.shape, gamma.shape, beta.shape)
    if mode not in ("train", "eval"):
        raise AutodiffError(f"batchnorm: unknown mode '{mode}'")
    n = x.shape[0]
    gd = gamma.data

    if mode == "train":
        if n < 2:
            raise AutodiffError("batchnorm: train mode needs a batch of at least 2")
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mean) * inv_std
        m = state.momentum
        state.running_mean.value = (1 - m) * state.running_mean.value + m * mean
        state.running_var.value = (1 - m) * state.running_var.value + m * var * n / (n - 1)

        def backward(g):
            dxhat = g * gd
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)
    else:
        inv_std = 1.0 / np.sqrt(state.running_var.value + state.eps)
        xhat = (x.data - state.running_mean.value) * inv_std

        def backward(g):
            return g * gd * inv_std, (g * xhat).sum(axis=0), g.sum(axis=0)

    out = gd * xhat + beta.data
    return x.tape.emit("batchnorm", (x, gamma, beta), out, backward)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        mask = x.data > 0
        out = np.where(mask, x.data, 0.0)

        def backward(g):
            return (g * mask,)
    elif kind == "sigmoid":
        out = expit(x.data)

        def backward(g):
            return (g * out * (1.0 - out),)
    elif kind == "tanh":
        out = np.tanh(x.data)

        def backward(g):
            return (g * (1.0 - out * out),)
    else:
        raise AutodiffError(f"unknown activation '{kind}'")
    return x.tape.emit(kind, (x,), out, backward)


def softmax_axis(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise AutodiffError(f"softmax: axis {axis} invalid for shape {x.shape}")
    out = softmax(x.data, axis=axis)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return x.tape.emit("softmax", (x,), out, backward)


def maxpool_points(x: Tensor) -> Tensor:
    """[batch, points, feat] -> [batch, feat]; ties route to the lowest point index."""
    if x.data.ndim != 3 or x.shape[1] < 1:
        raise AutodiffError(f"maxpool_points: expected [batch, points>=1, feat], got {x.shape}")
    arg = np.argmax(x.data, axis=1)
    out = np.take_along_axis(x.data, arg[:, None, :], axis=1)[:, 0, :]
    shape = x.shape

    def backward(g):
        dx = np.zeros(shape)
        np.put_along_axis(dx, arg[:, None, :], g[:, None, :], axis=1)
        return (dx,)

    return x.tape.emit("maxpool_points", (x,), out, backward)


def combine(kind: str, inputs: Sequence[Tensor]) -> Tensor:
    if kind == "concat_lastaxis":
        if not inputs:
            raise AutodiffError("concat: no inputs")
        lead = inputs[0].shape[:-1]
        if any(t.shape[:-1] != lead for t in inputs):
            raise _shape_error("concat", *(t.shape for t in inputs))
        widths = [t.shape[-1] for t in inputs]
        out = np.concatenate([t.data for t in inputs], axis=-1)
        splits = np.cumsum(widths)[:-1]

        def backward(g):
            return np.split(g, splits, axis=-1)

        return inputs[0].tape.emit("concat", tuple(inputs), out, backward)

    if kind == "elementwise_mul":
        if len(inputs) != 2:
            raise AutodiffError("elementwise_mul takes exactly two inputs")
        a, b = inputs
        per_feature = b.data.ndim == 1 and a.shape[-1:] == b.shape
        if a.shape != b.shape and not per_feature:
            raise _shape_error("elementwise_mul", a.shape, b.shape)
        ad, bd = a.data, b.data

        def backward(g):
            gb = g * ad
            if per_feature:
                gb = gb.reshape(-1, bd.shape[0]).sum(axis=0)
            return g * bd, gb

        return a.tape.emit("elementwise_mul", (a, b), ad * bd, backward)

    raise AutodiffError(f"unknown combine kind '{kind}'")


# ── Structural and scalar helpers ────────────────────────

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise _shape_error("reshape", src, tuple(shape)) from e

    def backward(g):
        return (g.reshape(src),)

    return x.tape.emit("reshape", (x,), out, backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return x.tape.emit("transpose", (x,), out, backward)


def take(x: Tensor, axis: int, index: int) -> Tensor:
    """Select one index along an axis (the axis is dropped)."""
    out = np.take(x.data, index, axis=axis)
    shape = x.shape

    def backward(g):
        dx = np.zeros(shape)
        np.copyto(np.moveaxis(dx, axis, 0)[index], g)
        return (dx,)

    return x.tape.emit("take", (x,), out, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("add", a.shape, b.shape)
    return a.tape.emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return x.tape.emit("scale", (x,), x.data * c, lambda g: (g * c,))


def reduce(x: Tensor, kind: str = "sum") -> Tensor:
    shape = x.shape
    if kind == "sum":
        out = np.array(x.data.sum())
        return x.tape.emit("sum", (x,), out, lambda g: (np.full(shape, float(g)),))
    if kind == "mean":
        n = x.data.size
        out = np.array(x.data.mean())
        return x.tape.emit("mean", (x,), out, lambda g: (np.full(shape, float(g) / n),))
    raise AutodiffError(f"unknown reduction '{kind}'")


# ── Optimizer ────────────────────────────────────────────

def sgd_step(params: Iterable[Parameter], lr: float):
    """θ ← θ − lr·grad for trainable params, then zero every grad."""
    if lr < 0:
        raise AutodiffError(f"learning rate must be nonnegative, got {lr}")
    for p in params:
        if p.trainable and lr > 0:
            p.value = p.value - lr * p.grad
        p.zero_grad()


def grad_norm(params: Iterable[Parameter]) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.trainable)))


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Rescale grads so their global L2 norm is at most max_norm. Returns the pre-clip norm."""
    params = list(params)
    norm = grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.trainable:
                p.grad = p.grad * factor
    return norm
