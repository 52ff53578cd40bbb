"""Dense float64 tensors with reverse-mode differentiation.

Only the primitives the dynamics model needs are provided. Every op checks
its output for NaN/Inf and raises :class:`NonFiniteError` instead of letting
bad values propagate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


class GraphStateError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- primitives


def affine(x, W, b=None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``; leading axes are batch."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"affine: input width {x.shape[-1]} != weight rows {W.shape[0]}")
    out = x.data @ W.data
    parents = (x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeError(f"affine: bias shape {b.shape} != ({W.shape[1]},)")
        out = out + b.data
        parents = (x, W, b)

    def backward(g):
        gx = g @ W.data.T
        gW = x.data.reshape(-1, W.shape[0]).T @ g.reshape(-1, W.shape[1])
        if b is None:
            return gx, gW
        return gx, gW, g.reshape(-1, W.shape[1]).sum(axis=0)

    return _make(out, parents, backward, "affine")


def conv1d(x, W, b=None, stride: int = 1) -> Tensor:
    """Convolution along the horizon axis with 'same'-style zero padding.

    ``x`` is (B, L, C_in), ``W`` is (k, C_in, C_out); output length is
    ``ceil(L / stride)`` for odd ``k``.
    """
    x, W = as_tensor(x), as_tensor(W)
    if x.ndim != 3:
        raise ShapeError(f"conv1d expects (B, L, C) input, got {x.shape}")
    k, cin, cout = W.shape
    B, L, C = x.shape
    if C != cin:
        raise ShapeError(f"conv1d: input channels {C} != weight channels {cin}")
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    lout = (L + 2 * pad - k) // stride + 1
    span = stride * (lout - 1) + 1
    cols = np.stack([xp[:, r : r + span : stride] for r in range(k)], axis=2)
    cols = cols.reshape(B, lout, k * cin)
    Wr = W.data.reshape(k * cin, cout)
    out = cols @ Wr
    parents = (x, W)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents = (x, W, b)

    def backward(g):
        gcols = (g @ Wr.T).reshape(B, lout, k, cin)
        gxp = np.zeros_like(xp)
        for r in range(k):
            gxp[:, r : r + span : stride] += gcols[:, :, r]
        gx = gxp[:, pad : pad + L]
        gW = (cols.reshape(-1, k * cin).T @ g.reshape(-1, cout)).reshape(k, cin, cout)
        if b is None:
            return gx, gW
        return gx, gW, g.reshape(-1, cout).sum(axis=0)

    return _make(out, parents, backward, "conv1d")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def _logistic(v: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free and gives exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _logistic(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _logistic(x.data)
    return _make(x.data * s, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),), "silu")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.logaddexp(0.0, x.data), (x,), lambda g: (g * _logistic(x.data),), "softplus")


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def total(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(total(x, axis), 1.0 / n)


def max_reduce(x, axis: int) -> Tensor:
    """Max over ``axis``; on ties the lowest index wins (numpy argmax order)."""
    x = as_tensor(x)
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, (x,), backward, "max_reduce")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, backward, "concat")


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _make(y, (x,), backward, "layer_norm")


def gather(x, index, axis: int = 0) -> Tensor:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    out = np.take(x.data, index, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        ax = axis % x.ndim
        gmoved = np.moveaxis(g, list(range(ax, ax + index.ndim)), list(range(index.ndim)))
        gmoved = gmoved.reshape((index.size,) + gmoved.shape[index.ndim :])
        np.add.at(np.moveaxis(gx, ax, 0), index.ravel(), gmoved)
        return (gx,)

    return _make(out, (x,), backward, "gather")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = np.array(x.data[index])

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(out, (x,), backward, "getitem")


# ---------------------------------------------------------------- graph


def topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, wrt: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar ``output`` w.r.t. the named leaves."""
    if output.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    if output.requires_grad:
        for node in reversed(topological_order(output)):
            g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    return {name: np.array(grads.get(id(t), np.zeros_like(t.data))).reshape(t.shape) for name, t in wrt.items()}


@dataclass
class Graph:
    """A traced computation: ``fn(inputs, params) -> named outputs``.

    ``input_shapes`` declares each input's shape; ``None`` entries are free
    (batch) extents. ``nodes`` holds the topological order of the last trace.
    """

    fn: Callable[[dict[str, Tensor], dict[str, Tensor]], dict[str, Tensor]]
    params: dict[str, np.ndarray]
    input_shapes: dict[str, tuple[int | None, ...]] = field(default_factory=dict)
    nodes: list[Tensor] = field(default_factory=list, repr=False)
    outputs: dict[str, Tensor] | None = field(default=None, repr=False)
    _leaves: dict[str, Tensor] = field(default_factory=dict, repr=False)


def _check_shape(name: str, got: tuple[int, ...], want: tuple[int | None, ...]) -> None:
    if len(got) != len(want) or any(w is not None and w != g for g, w in zip(got, want)):
        raise ShapeError(f"input {name!r}: shape {got} does not match declared {want}")


def forward_eval(graph: Graph, inputs: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    if graph.input_shapes and set(inputs) != set(graph.input_shapes):
        raise ShapeError(f"inputs {sorted(inputs)} != declared {sorted(graph.input_shapes)}")
    tin = {}
    for name, value in inputs.items():
        arr = np.asarray(value, dtype=np.float64)
        if name in graph.input_shapes:
            _check_shape(name, arr.shape, graph.input_shapes[name])
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"input {name!r} is not finite")
        tin[name] = Tensor(arr)
    graph._leaves = {k: Tensor(v, requires_grad=True) for k, v in graph.params.items()}
    outputs = graph.fn(tin, graph._leaves)
    graph.outputs = outputs
    graph.nodes = []
    seen: set[int] = set()
    for out in outputs.values():
        for node in topological_order(out):
            if id(node) not in seen:
                seen.add(id(node))
                graph.nodes.append(node)
    return outputs


def backward_gradients(graph: Graph, output_scalar: Tensor) -> dict[str, np.ndarray]:
    if graph.outputs is None:
        raise GraphStateError("backward_gradients called before forward_eval")
    return grad(output_scalar, graph._leaves)


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    state: OptimizerState, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]
) -> dict[str, np.ndarray]:
    """One adaptive-moment update, in place on ``params`` (also returned)."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, param {params[name].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------- checking


def numerical_gradient(
    f: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    names: Iterable[str] | None = None,
    step: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central finite differences of a scalar function of named arrays."""
    out = {}
    for name in names if names is not None else params:
        p = params[name]
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up = f(params)
            flat[i] = old - step
            down = f(params)
            flat[i] = old
            gflat[i] = (up - down) / (2.0 * step)
        out[name] = g
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
