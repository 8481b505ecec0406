"""Small reverse-mode autodiff kernel over numpy arrays.

Every operation records a node on a :class:`Graph`.  Nodes are appended in
execution order, so the node list is already topologically sorted and
:func:`backward` is a single reverse sweep.

Parameters are registered on the graph by name.  A registration may read only
a leading slice of the stored array (``index``); the gradient slot for that
name is always full-shaped, with zeros outside every slice that was read, and
``Gradients.masks`` records which entries were touched.  That is what lets a
weight-sharing supernet update one path without disturbing the rest.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class NonFiniteError(FloatingPointError):
    """A forward value or gradient contained NaN/Inf."""


class Tensor:
    """A node in a :class:`Graph`: cached output plus a backward closure."""

    __slots__ = ("data", "graph", "parents", "op", "id", "_backward", "param")

    def __init__(self, graph, data, parents=(), op="leaf", backward=None, param=None):
        self.data = data
        self.graph = graph
        self.parents = tuple(parents)
        self.op = op
        self._backward = backward
        self.param = param
        self.id = len(graph.nodes)
        graph.nodes.append(self)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(op={self.op}, id={self.id}, shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


@dataclass
class _ParamSlot:
    array: np.ndarray
    reads: List[Tuple[Tensor, object]] = field(default_factory=list)


@dataclass
class Gradients:
    """Result of :func:`backward`: full-shaped gradients and touched masks."""

    grads: Dict[str, np.ndarray]
    masks: Dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]

    def __contains__(self, name: str) -> bool:
        return name in self.grads

    def __iter__(self):
        return iter(self.grads)

    def items(self):
        return self.grads.items()


class Graph:
    """Tape of operations plus a named parameter registry.

    A graph is single-use: build it for one forward pass, call
    :func:`backward` once, then discard it.
    """

    def __init__(self, dtype=np.float32, check_finite: bool = True):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self.nodes: List[Tensor] = []
        self.params: Dict[str, _ParamSlot] = {}

    def param(self, name: str, array: np.ndarray, index=None) -> Tensor:
        """Register ``array`` (or ``array[index]``) as a differentiable leaf."""
        slot = self.params.get(name)
        if slot is None:
            slot = self.params[name] = _ParamSlot(array)
        elif slot.array is not array:
            raise ValueError(f"parameter {name!r} registered with two different arrays")
        data = array if index is None else array[index]
        if data.dtype != self.dtype:
            data = data.astype(self.dtype)
        t = Tensor(self, data, op=f"param:{name}", param=name)
        slot.reads.append((t, index))
        return t

    def const(self, value) -> Tensor:
        return Tensor(self, np.asarray(value, dtype=self.dtype), op="const")

    def record(self, op: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
        if self.check_finite and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite output from {op} (node {len(self.nodes)})")
        return Tensor(self, data, parents, op, backward)


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Tensor):
            return x.graph
    raise TypeError("at least one operand must be a Tensor")


def _lift(g: Graph, x) -> Tensor:
    return x if isinstance(x, Tensor) else g.const(x)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(graph: Graph, loss: Tensor) -> Gradients:
    """Reverse sweep from scalar ``loss``; returns gradients for every parameter.

    Parameters that the loss does not depend on still get a zero gradient
    and an all-False mask, so callers can iterate over ``graph.params``.
    """
    if loss.graph is not graph:
        raise ValueError("loss node belongs to a different graph")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    node_grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(graph.nodes[: loss.id + 1]):
        g = node_grads.pop(node.id, None)
        if g is None or node._backward is None:
            if g is not None:
                node_grads[node.id] = g
            continue
        if graph.check_finite and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient at node {node.id} ({node.op})")
        parent_grads = node._backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if parent.id in node_grads:
                node_grads[parent.id] = node_grads[parent.id] + pg
            else:
                node_grads[parent.id] = pg

    grads: Dict[str, np.ndarray] = {}
    masks: Dict[str, np.ndarray] = {}
    for name, slot in graph.params.items():
        full = np.zeros(slot.array.shape, dtype=graph.dtype)
        mask = np.zeros(slot.array.shape, dtype=bool)
        for leaf, index in slot.reads:
            g = node_grads.get(leaf.id)
            if g is None:
                continue
            if graph.check_finite and not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
            if index is None:
                full += g
                mask[...] = True
            else:
                full[index] += g
                mask[index] = True
        grads[name] = full
        masks[name] = mask
    return Gradients(grads, masks)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    return g.record("add", a.data + b.data, (a, b),
                    lambda gr: (unbroadcast(gr, a.shape), unbroadcast(gr, b.shape)))


def sub(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    return g.record("sub", a.data - b.data, (a, b),
                    lambda gr: (unbroadcast(gr, a.shape), unbroadcast(-gr, b.shape)))


def mul(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    return g.record("mul", a.data * b.data, (a, b),
                    lambda gr: (unbroadcast(gr * b.data, a.shape), unbroadcast(gr * a.data, b.shape)))


def div(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    out = a.data / b.data

    def bw(gr):
        ga = gr / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * out, b.shape)

    return g.record("div", out, (a, b), bw)


def neg(x: Tensor) -> Tensor:
    return x.graph.record("neg", -x.data, (x,), lambda gr: (-gr,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return x.graph.record("exp", out, (x,), lambda gr: (gr * out,))


def log(x: Tensor) -> Tensor:
    return x.graph.record("log", np.log(x.data), (x,), lambda gr: (gr / x.data,))


def sqrt(x: Tensor) -> Tensor:
    """Square root; the gradient at exactly 0 is taken as 0."""
    out = np.sqrt(x.data)

    def bw(gr):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * gr / safe, 0.0).astype(gr.dtype),)

    return x.graph.record("sqrt", out, (x,), bw)


def power(x: Tensor, p: float) -> Tensor:
    out = x.data ** p
    return x.graph.record(f"pow{p}", out, (x,), lambda gr: (gr * p * x.data ** (p - 1),))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return x.graph.record("relu", out, (x,), lambda gr: (gr * (x.data > 0),))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); no gradient flows where the floor is active."""
    out = np.maximum(x.data, floor)
    return x.graph.record("clamp_min", out, (x,), lambda gr: (gr * (x.data > floor),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return x.graph.record("clip", out, (x,), lambda gr: (gr * inside,))


# ---------------------------------------------------------------- reductions / shape


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(gr):
        if axis is not None and not keepdims:
            gr = np.expand_dims(gr, axis)
        return (np.broadcast_to(gr, x.shape).copy(),)

    return x.graph.record("sum", np.asarray(out, dtype=x.data.dtype), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    return x.graph.record("reshape", x.data.reshape(shape), (x,), lambda gr: (gr.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return x.graph.record("transpose", out, (x,), lambda gr: (np.transpose(gr, inv),))


def getitem(x: Tensor, index) -> Tensor:
    def bw(gr):
        full = np.zeros_like(x.data)
        if _is_fancy(index):
            np.add.at(full, index, gr)
        else:
            full[index] = gr
        return (full,)

    return x.graph.record("getitem", np.asarray(x.data[index]), (x,), bw)


def _is_fancy(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def pick(x: Tensor, labels: np.ndarray) -> Tensor:
    """``x[i, labels[i]]`` for a 2-D ``x``."""
    labels = np.asarray(labels)
    rows = np.arange(x.shape[0])

    def bw(gr):
        full = np.zeros_like(x.data)
        full[rows, labels] = gr
        return (full,)

    return x.graph.record("pick", x.data[rows, labels], (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ValueError("concat of an empty list")
    g = xs[0].graph
    ndim = xs[0].ndim
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for {ndim}-d inputs")
    ax = axis % ndim
    out = np.concatenate([x.data for x in xs], axis=ax)
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def bw(gr):
        return tuple(np.take(gr, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return g.record("concat", out, xs, bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ValueError("stack of an empty list")
    return concat([reshape(x, x.shape[:axis % (x.ndim + 1)] + (1,) + x.shape[axis % (x.ndim + 1):]) for x in xs],
                  axis=axis)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    out = a.data @ b.data

    def bw(gr):
        ga = gr @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ gr
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return g.record("matmul", out, (a, b), bw)


def affine(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ W + b`` over the trailing dimension of ``x``."""
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"affine: x trailing dim {x.shape[-1]} != W rows {W.shape[0]}")
    if b is not None and b.shape != (W.shape[1],):
        raise ValueError(f"affine: bias shape {b.shape} != ({W.shape[1]},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = (x2 @ W.data).reshape(lead + (W.shape[1],))
    if b is not None:
        out = out + b.data

    def bw(gr):
        g2 = gr.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape)
        gW = x2.T @ g2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    parents = (x, W) if b is None else (x, W, b)
    return x.graph.record("affine", out, parents, bw)


def conv1d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, dilation: int = 1) -> Tensor:
    """Same-length dilated 1-D convolution over frames.

    ``x`` is ``(T, Cin)`` or ``(B, T, Cin)``; ``w`` is ``(K, Cin, Cout)`` with
    ``K`` odd.  Out-of-range frames read as zero.
    """
    if dilation < 1:
        raise ValueError(f"dilation must be positive, got {dilation}")
    K, cin, cout = w.shape
    if K % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {K}")
    if x.shape[-1] != cin:
        raise ValueError(f"conv1d: input channels {x.shape[-1]} != kernel Cin {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv1d: bias shape {bias.shape} != ({cout},)")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    B, T, _ = xd.shape
    pad = (K - 1) // 2 * dilation
    xp = np.zeros((B, T + 2 * pad, cin), dtype=xd.dtype)
    xp[:, pad:pad + T] = xd
    out = np.zeros((B, T, cout), dtype=xd.dtype)
    for k in range(K):
        out += xp[:, k * dilation:k * dilation + T] @ w.data[k]
    if bias is not None:
        out += bias.data

    def bw(gr):
        g3 = gr[None] if squeeze else gr
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        g2 = g3.reshape(-1, cout)
        for k in range(K):
            window = xp[:, k * dilation:k * dilation + T]
            gxp[:, k * dilation:k * dilation + T] += g3 @ w.data[k].T
            gw[k] = window.reshape(-1, cin).T @ g2
        gx = gxp[:, pad:pad + T]
        gx = gx[0] if squeeze else gx
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if bias is None else (x, w, bias)
    return x.graph.record(f"conv1d(d={dilation})", out[0] if squeeze else out, parents, bw)


# ---------------------------------------------------------------- normalisation / softmax


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for {x.ndim}-d input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(gr):
        return (out * (gr - (gr * out).sum(axis=axis, keepdims=True)),)

    return x.graph.record("softmax", out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(gr):
        return (gr - sm * gr.sum(axis=axis, keepdims=True),)

    return x.graph.record("log_softmax", out, (x,), bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               mode: str = "train", momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalisation over every axis but the last.

    In ``train`` mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (pass views to update a slice only).
    In ``eval`` mode the running statistics are used as-is.
    """
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batch_norm: affine params must have shape ({C},)")
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        n = x.data.size // C
        if n < 2:
            raise ValueError("batch_norm in train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=axes)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * n / (n - 1)

        def bw(gr):
            gb = gr.sum(axis=axes)
            gg = (gr * xhat).sum(axis=axes)
            gxhat = gr * gamma.data
            gx = inv / n * (n * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
            return gx.astype(x.data.dtype), gg, gb
    elif mode == "eval":
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.data.dtype)
        xhat = (x.data - running_mean.astype(x.data.dtype)) * inv

        def bw(gr):
            return (gr * gamma.data * inv, (gr * xhat).sum(axis=axes), gr.sum(axis=axes))
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    out = (xhat * gamma.data + beta.data).astype(x.data.dtype)
    return x.graph.record(f"batch_norm({mode})", out, (x, gamma, beta), bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``."""
    sq = sum(x * x, axis=axis, keepdims=True)
    return x / sqrt(clamp_min(sq, eps * eps))


# ---------------------------------------------------------------- optimiser


def sgd_step(params: Dict[str, np.ndarray], grads, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, velocity: Optional[Dict[str, np.ndarray]] = None,
             masks: Optional[Dict[str, np.ndarray]] = None) -> Dict[str, np.ndarray]:
    """In-place SGD with momentum: ``v = mu*v + g + wd*p; p -= lr*v``.

    ``grads`` may be a :class:`Gradients`; its masks are then used unless
    ``masks`` is given explicitly.  Entries outside a mask keep both their
    value and their velocity, so slack weights of a supernet never drift.
    Returns the velocity dict (created if ``velocity`` is None).
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    if isinstance(grads, Gradients):
        masks = grads.masks if masks is None else masks
        grads = grads.grads
    if velocity is None:
        velocity = {}
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        m = None if masks is None else masks.get(name)
        if m is None:
            v *= momentum
            v += g + weight_decay * p
            p -= lr * v
        elif m.any():
            v[m] = momentum * v[m] + g[m] + weight_decay * p[m]
            p[m] -= lr * v[m]
    return velocity


# ---------------------------------------------------------------- gradient checking


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a|| + ||b||, tiny)``."""
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = np.linalg.norm(np.ravel(a)) + np.linalg.norm(np.ravel(b))
    return float(num / max(den, 1e-30))


def check_gradients(build: Callable[[Graph, Dict[str, Tensor]], Tensor], arrays: Dict[str, np.ndarray],
                    h: float = 1e-4) -> Dict[str, float]:
    """Compare :func:`backward` with central differences in 64-bit mode.

    ``build(graph, leaves)`` must return a scalar loss tensor, where
    ``leaves[name]`` is the registered parameter for ``arrays[name]``.
    Returns the relative error per array.
    """
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    def run():
        g = Graph(np.float64)
        leaves = {k: g.param(k, v) for k, v in arrays.items()}
        return g, build(g, leaves)

    g, loss = run()
    analytic = backward(g, loss)
    errors = {}
    for name, arr in arrays.items():
        numeric = numeric_gradient(lambda: float(run()[1].data), arr, h)
        errors[name] = relative_error(analytic[name], numeric)
    return errors
