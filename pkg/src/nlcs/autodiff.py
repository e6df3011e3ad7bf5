"""Dense float64 tensors with a recording tape and reverse-mode gradients.

Only the operations the reconstruction network needs are provided.  Every
op is a pure function of its inputs; when at least one input lives on a
:class:`Tape` the op is recorded there so that :func:`backward` can walk the
record in reverse.

Shapes must agree exactly.  The single exception is scalar-by-tensor
arithmetic, where an operand of size one is broadcast.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Immutable float64 array, optionally attached to a tape."""

    __slots__ = ("data", "tape", "name")

    def __init__(self, data, tape: "Tape | None" = None, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    __array_priority__ = 100

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., tuple]


@dataclass
class Tape:
    """Ordered record of primitive ops plus a named parameter registry.

    Recording order is a valid topological order, so a single reverse sweep
    visits each node once.
    """

    nodes: list[Node] = field(default_factory=list)
    params: dict[str, Tensor] = field(default_factory=dict)

    def param(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(value, tape=self, name=name)
        self.params[name] = t
        return t

    def clear(self) -> None:
        """Drop recorded nodes so their buffers can be freed right away.

        Nodes and tensors reference each other, so without this the memory
        of a finished pass waits for the cyclic garbage collector.
        """
        self.nodes.clear()
        self.params.clear()

    def replay(self) -> bool:
        """Re-run every recorded forward and report bit-identical agreement."""
        values: dict[int, np.ndarray] = {id(p): p.data for p in self.params.values()}
        for node in self.nodes:
            args = [values.get(id(t), t.data) for t in node.inputs]
            out = node.forward(*args)
            if not np.array_equal(out, node.output.data):
                return False
            values[id(node.output)] = out
        return True


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = t.tape
    return tape


def _apply(op: str, inputs: Sequence, forward, vjp) -> Tensor:
    inputs = tuple(as_tensor(t) for t in inputs)
    out = Tensor(forward(*(t.data for t in inputs)))
    tape = _tape_of(inputs)
    if tape is not None:
        out.tape = tape
        tape.nodes.append(Node(op, inputs, out, forward, vjp))
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _check_binary(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not agree")


def _unbroadcast(g: np.ndarray, like: np.ndarray) -> np.ndarray:
    if g.shape == like.shape:
        return g
    return np.full(like.shape, g.sum())


def _scalar_view(a: np.ndarray, other: np.ndarray) -> np.ndarray:
    # size-1 operands broadcast as true scalars regardless of their rank
    if a.size == 1 and a.shape != other.shape:
        return a.reshape(())
    return a


def add(a, b) -> Tensor:
    def fwd(x, y):
        _check_binary(x, y, "add")
        return _scalar_view(x, y) + _scalar_view(y, x)

    def vjp(g, x, y, out):
        return _unbroadcast(g, x), _unbroadcast(g, y)

    return _apply("add", (a, b), fwd, vjp)


def sub(a, b) -> Tensor:
    def fwd(x, y):
        _check_binary(x, y, "sub")
        return _scalar_view(x, y) - _scalar_view(y, x)

    def vjp(g, x, y, out):
        return _unbroadcast(g, x), _unbroadcast(-g, y)

    return _apply("sub", (a, b), fwd, vjp)


def mul(a, b) -> Tensor:
    def fwd(x, y):
        _check_binary(x, y, "mul")
        return _scalar_view(x, y) * _scalar_view(y, x)

    def vjp(g, x, y, out):
        return (_unbroadcast(g * _scalar_view(y, x), x),
                _unbroadcast(g * _scalar_view(x, y), y))

    return _apply("mul", (a, b), fwd, vjp)


def div(a, b) -> Tensor:
    def fwd(x, y):
        _check_binary(x, y, "div")
        return _scalar_view(x, y) / _scalar_view(y, x)

    def vjp(g, x, y, out):
        ys = _scalar_view(y, x)
        return (_unbroadcast(g / ys, x),
                _unbroadcast(-g * _scalar_view(x, y) / (ys * ys), y))

    return _apply("div", (a, b), fwd, vjp)


def square(a) -> Tensor:
    return _apply("square", (a,), lambda x: x * x, lambda g, x, out: (2.0 * g * x,))


def sqrt(a) -> Tensor:
    def vjp(g, x, out):
        return (g * 0.5 / np.where(out > 0, out, np.inf),)

    return _apply("sqrt", (a,), np.sqrt, vjp)


def relu(a) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is taken as 0."""

    def vjp(g, x, out):
        return (g * (x > 0),)

    return _apply("relu", (a,), lambda x: np.maximum(x, 0.0), vjp)


def softplus(a) -> Tensor:
    def fwd(x):
        return np.logaddexp(0.0, x)

    def vjp(g, x, out):
        return (g / (1.0 + np.exp(-x)),)

    return _apply("softplus", (a,), fwd, vjp)


def straight_through_binary(a) -> Tensor:
    """1 where x >= 0 else 0 in the forward pass; identity gradient."""

    def fwd(x):
        return (x >= 0).astype(np.float64)

    return _apply("binary", (a,), fwd, lambda g, x, out: (g,))


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum_all(a) -> Tensor:
    def vjp(g, x, out):
        return (np.full(x.shape, float(g)),)

    return _apply("sum", (a,), lambda x: np.asarray(x.sum()), vjp)


def reshape(a, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def fwd(x):
        if int(np.prod(shape)) != x.size:
            raise ShapeError(f"cannot reshape {x.shape} to {shape}")
        return x.reshape(shape)

    return _apply("reshape", (a,), fwd, lambda g, x, out: (g.reshape(x.shape),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def fwd(x):
        return np.ascontiguousarray(x.transpose(axes))

    return _apply("transpose", (a,), fwd, lambda g, x, out: (g.transpose(inv),))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes must match."""

    def fwd(x, y):
        ok = x.ndim >= 2 and y.ndim >= 2 and x.shape[-1] == y.shape[-2]
        if ok and x.ndim == y.ndim:
            ok = x.shape[:-2] == y.shape[:-2]
        elif ok:
            ok = min(x.ndim, y.ndim) == 2
        if not ok:
            raise ShapeError(f"matmul: shapes {x.shape} and {y.shape} do not agree")
        return x @ y

    def vjp(g, x, y, out):
        gx = g @ np.swapaxes(y, -1, -2)
        gy = np.swapaxes(x, -1, -2) @ g
        if gx.ndim > x.ndim:
            gx = gx.reshape((-1,) + x.shape).sum(axis=0)
        if gy.ndim > y.ndim:
            gy = gy.reshape((-1,) + y.shape).sum(axis=0)
        return gx, gy

    return _apply("matmul", (a, b), fwd, vjp)


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax with max subtraction along ``axis``."""

    def fwd(x):
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=axis, keepdims=True)

    def vjp(g, x, out):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _apply("softmax", (a,), fwd, vjp)


# ---------------------------------------------------------------------------
# convolution and sub-pixel rearrangement


def _im2col(x, k, stride, pad):
    """``[N, C, H, W] -> ([N*Ho*Wo, k*k*C], Ho, Wo)`` with zero padding.

    Columns are ordered (ki, kj, c) so every copy below moves contiguous
    channel runs; filters must be flattened the same way (:func:`_flat`).
    """
    n, c, h, w = x.shape
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    xp[:, pad:pad + h, pad:pad + w, :] = x.transpose(0, 2, 3, 1)
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.empty((n, ho, wo, k, k, c))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * (ho - 1) + 1:stride,
                                        j:j + stride * (wo - 1) + 1:stride, :]
    return cols.reshape(n * ho * wo, k * k * c), ho, wo


def _flat(w):
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _conv_forward(x, w, stride, pad):
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    n, c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if ci != c or k != k2:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with filters {w.shape}")
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {(h, wd)}")
    wf = _flat(w)
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.empty((n, o, ho * wo))
    # one sample at a time keeps the column buffer cache-sized (~2x faster)
    for s in range(n):
        np.matmul(wf, _im2col(x[s:s + 1], k, stride, pad)[0].T, out=out[s])
    out = out.reshape(n, o, ho, wo)
    return out if batched else out[0]


def _conv_backward(g, x, w, stride, pad):
    batched = x.ndim == 4
    if not batched:
        x, g = x[None], g[None]
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = g.shape[2:]
    acc = np.zeros((o, k * k * c))
    for s in range(n):
        acc += g[s].reshape(o, -1) @ _im2col(x[s:s + 1], k, stride, pad)[0]
    gw = np.ascontiguousarray(acc.reshape(o, k, k, c).transpose(0, 3, 1, 2))
    if stride == 1 and pad <= k - 1:
        # adjoint of a stride-1 correlation is a correlation with flipped filters
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx = _conv_forward(g, wf, 1, k - 1 - pad)
    else:
        gt = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gcols = (gt @ _flat(w)).reshape(n, ho, wo, k, k, c)
        gxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c))
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += \
                    gcols[:, :, :, i, j, :]
        gx = np.ascontiguousarray(
            gxp[:, pad:pad + h, pad:pad + wd, :].transpose(0, 3, 1, 2))
    return (gx if batched else gx[0]), gw


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation without bias.

    ``x`` is ``[C, H, W]`` or ``[N, C, H, W]``; ``w`` is ``[O, C, k, k]``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim not in (3, 4) or w.data.ndim != 4:
        raise ShapeError(f"conv2d: unsupported ranks {x.shape}, {w.shape}")
    if x.shape[-3] != w.shape[1]:
        raise ShapeError(
            f"conv2d: input channels of {x.shape} do not match filters {w.shape}")

    def fwd(xa, wa):
        return _conv_forward(xa, wa, stride, pad)

    def vjp(g, xa, wa, out):
        return _conv_backward(g, xa, wa, stride, pad)

    return _apply("conv2d", (x, w), fwd, vjp)


def _shuffle(x, r):
    lead = x.shape[:-3]
    c, h, w = x.shape[-3:]
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by r^2={r * r}")
    co = c // (r * r)
    y = x.reshape(lead + (co, r, r, h, w))
    nl = len(lead)
    perm = tuple(range(nl)) + tuple(nl + p for p in (0, 3, 1, 4, 2))
    return np.ascontiguousarray(y.transpose(perm)).reshape(lead + (co, h * r, w * r))


def _unshuffle(x, r):
    lead = x.shape[:-3]
    c, hr, wr = x.shape[-3:]
    if hr % r or wr % r:
        raise ShapeError(f"pixel_unshuffle: spatial {hr}x{wr} not divisible by r={r}")
    h, w = hr // r, wr // r
    y = x.reshape(lead + (c, h, r, w, r))
    nl = len(lead)
    perm = tuple(range(nl)) + tuple(nl + p for p in (0, 2, 4, 1, 3))
    return np.ascontiguousarray(y.transpose(perm)).reshape(lead + (c * r * r, h, w))


def pixel_shuffle(x, r: int) -> Tensor:
    """``[..., r*r*C, H, W] -> [..., C, r*H, r*W]``.

    ``out[c, r*h + a, r*w + b] = in[c*r*r + a*r + b, h, w]``.
    """
    return _apply("pixel_shuffle", (x,), lambda a: _shuffle(a, r),
                  lambda g, a, out: (_unshuffle(g, r),))


def pixel_unshuffle(x, r: int) -> Tensor:
    return _apply("pixel_unshuffle", (x,), lambda a: _unshuffle(a, r),
                  lambda g, a, out: (_shuffle(g, r),))


# ---------------------------------------------------------------------------
# gradients


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to every registered parameter.

    Parameters the loss does not depend on get zero gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    visited = set()
    for node in reversed(tape.nodes):
        key = id(node.output)
        assert key not in visited, "node visited twice"
        visited.add(key)
        g = grads.pop(key, None)
        if g is None:
            continue
        parts = node.vjp(g, *(t.data for t in node.inputs), node.output.data)
        for t, gi in zip(node.inputs, parts):
            if t.tape is None:
                continue
            k = id(t)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = np.asarray(gi, dtype=np.float64)
    out = {}
    for name, p in tape.params.items():
        g = grads.get(id(p))
        out[name] = np.zeros(p.shape) if g is None else g.reshape(p.shape)
    return out


def grad_check(f: Callable[[Tape, dict[str, Tensor]], Tensor],
               params: dict[str, np.ndarray], eps: float = 1e-5,
               coords: int | None = None, seed: int = 0,
               skip_kinks: bool = False) -> float:
    """Worst relative error between :func:`backward` and central differences.

    ``f(tape, tensors)`` builds the loss from parameters registered on
    ``tape``.  The relative error denominator is ``max(|a|, |b|, 1e-8)``.
    When ``coords`` is given only that many randomly chosen coordinates per
    parameter are probed.

    With ``skip_kinks`` a probe is dropped when some relu input changes sign
    between the two perturbed evaluations: the loss is not differentiable
    inside that stencil, so the difference quotient says nothing about the
    gradient.  The number of dropped probes is kept in
    ``grad_check.last_skipped``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def evaluate(values):
        tape = Tape()
        tensors = {k: tape.param(k, v) for k, v in values.items()}
        return tape, f(tape, tensors)

    def loss_value(values):
        tape, loss = evaluate(values)
        pattern = [n.inputs[0].data > 0 for n in tape.nodes if n.op == "relu"]
        tape.clear()
        return loss.item(), pattern

    def same_pattern(a, b):
        return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))

    tape, loss = evaluate(params)
    if not np.array_equal(loss.data, loss_value(params)[0]):
        raise RuntimeError("function is not deterministic")
    analytic = backward(tape, loss)
    tape.clear()

    rng = np.random.default_rng(seed)
    worst = 0.0
    skipped = 0
    for name, value in params.items():
        value = np.asarray(value, dtype=np.float64)
        idx = np.arange(value.size)
        if coords is not None and coords < value.size:
            idx = np.sort(rng.choice(value.size, size=coords, replace=False))
        for i in idx:
            plus = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
            minus = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
            plus[name].reshape(-1)[i] += eps
            minus[name].reshape(-1)[i] -= eps
            (lp, pat_p), (lm, pat_m) = loss_value(plus), loss_value(minus)
            if skip_kinks and not same_pattern(pat_p, pat_m):
                skipped += 1
                continue
            fd = (lp - lm) / (2 * eps)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    grad_check.last_skipped = skipped
    return worst


grad_check.last_skipped = 0
