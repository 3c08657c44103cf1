"""Tape-based reverse-mode differentiation over dense float64 arrays.

Every primitive computes its forward value with numpy and, when a
:class:`CompGraph` is recording and an input requires gradients, appends a
node holding the local vector-Jacobian rule.  Nodes are appended in execution
order, so the tape is already topologically sorted and backpropagation is a
single reverse sweep.

Shapes follow the NCHW convention for images: ``(batch, channels, rows, cols)``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes violate a primitive's contract."""


class NonFiniteError(FloatingPointError):
    """A node produced NaN or infinite values."""


class GraphStateError(RuntimeError):
    """Backpropagation requested on a graph in the wrong state."""


class Tensor:
    """Dense array with an accumulated gradient slot."""

    __slots__ = ("data", "_grad", "requires_grad", "name", "_node")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self._grad = np.zeros_like(self.data)
        self.name = name
        self._node: Node | None = None

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


@dataclass(eq=False)
class Node:
    graph: "CompGraph"
    op: str
    index: int
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: list["CompGraph"] = []


def _active() -> "CompGraph | None":
    return _ACTIVE[-1] if _ACTIVE else None


class CompGraph:
    """Records the primitive applications of one forward pass.

    ``fn`` is called by :meth:`evaluate` with the named inputs; it may return
    a tensor or a dict of named tensors.  The graph can also be used directly
    as a context manager around eager code.
    """

    def __init__(self, fn: Callable | None = None, check_finite: bool = True):
        self.fn = fn
        self.check_finite = check_finite
        self.nodes: list[Node] = []
        self.outputs: dict[str, Tensor] = {}
        self.evaluated = False
        self.consumed = False

    def __enter__(self) -> "CompGraph":
        self.nodes = []
        self.outputs = {}
        self.evaluated = False
        self.consumed = False
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)
        self.evaluated = exc[0] is None

    def evaluate(self, **inputs) -> dict[str, Tensor]:
        if self.fn is None:
            raise GraphStateError("graph has no function to evaluate")
        with self:
            result = self.fn(**inputs)
        if isinstance(result, Tensor):
            result = {"output": result}
        self.outputs = dict(result)
        return self.outputs

    def record(self, op, inputs, out, backward) -> None:
        if self.check_finite and not np.all(np.isfinite(out.data)):
            raise NonFiniteError(f"{op} (node {len(self.nodes)}) produced non-finite values")
        node = Node(self, op, len(self.nodes), inputs, out, backward)
        out._node = node
        self.nodes.append(node)

    def backpropagate(self, loss: Tensor | str = "output") -> None:
        """Accumulate d(loss)/d(leaf) into every requires-grad leaf's ``grad``."""
        if not self.evaluated:
            raise GraphStateError("graph has not been evaluated")
        if self.consumed:
            raise GraphStateError("graph was already backpropagated; re-evaluate first")
        if isinstance(loss, str):
            loss = self.outputs[loss]
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        self.consumed = True
        if not self._owns(loss):
            if loss.requires_grad:
                loss.grad = loss.grad + 1.0
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        nodes, self.nodes = self.nodes, []
        while nodes:
            # release each node as soon as it is used; tensors and nodes form
            # reference cycles that the cyclic collector reclaims only late
            node = nodes.pop()
            node.output._node = None
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise ShapeError(
                        f"{node.op} (node {node.index}) returned grad {gi.shape} for input {t.shape}"
                    )
                if not self._owns(t):
                    t.grad = t.grad + gi
                else:
                    key = id(t)
                    grads[key] = grads[key] + gi if key in grads else gi

    def _owns(self, t: Tensor) -> bool:
        return t._node is not None and t._node.graph is self


def evaluate(graph: CompGraph, **inputs) -> dict[str, Tensor]:
    return graph.evaluate(**inputs)


def backpropagate(graph: CompGraph, loss: Tensor | str = "output") -> None:
    graph.backpropagate(loss)


@contextlib.contextmanager
def no_record():
    """Suspend recording (e.g. for validation forward passes)."""
    saved = list(_ACTIVE)
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE.extend(saved)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out._grad = None
    out.name = None
    out._node = None
    graph = _active()
    needs = graph is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        graph.record(op, tuple(inputs), out, backward)
    elif graph is not None and graph.check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} (node {len(graph.nodes)}) produced non-finite values")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        g = _active()
        idx = len(g.nodes) if g else "-"
        raise ShapeError(f"{op} (node {idx}): cannot broadcast {a.shape} with {b.shape}") from None


def _shape_error(op, msg):
    g = _active()
    idx = len(g.nodes) if g else "-"
    return ShapeError(f"{op} (node {idx}): {msg}")


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting; grads are summed back)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data
    return _make(
        "mul",
        (a, b),
        ad * bd,
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _make("div", (a, b), out, backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy semantics for ndim >= 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", f"incompatible operands {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make("matmul", (a, b), out, backward)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _stable_sigmoid(x.data)
    return _make("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 + 0.5 * np.tanh(0.5 * z)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make("exp", (x,), out, lambda g: (g * out,))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make("square", (x,), xd * xd, lambda g: (2.0 * g * xd,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make("sqrt", (x,), out, lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", (x,), np.asarray(out, dtype=DTYPE), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = math.prod(x.shape[a] for a in axes)
    shape = x.shape
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make("mean", (x,), np.asarray(out, dtype=DTYPE), backward)


def frobenius_sq(x) -> Tensor:
    """Sum of squared entries, ``||x||_F^2``."""
    x = as_tensor(x)
    xd = x.data
    return _make("frobenius_sq", (x,), np.asarray(np.vdot(xd, xd), dtype=DTYPE), lambda g: (2.0 * g * xd,))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", f"cannot reshape {src} to {tuple(shape)}") from None
    return _make("reshape", (x,), out, lambda g: (g.reshape(src),))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channel axis of NCHW by default)."""
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise _shape_error("concat", f"shapes {[t.shape for t in ts]} on axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make("concat", ts, out, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise _shape_error("stack", f"shapes {[t.shape for t in ts]}") from None
    n = len(ts)
    return _make(
        "stack", ts, out, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n))
    )


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[idx] = g
        return (full,)

    return _make("slice", (x,), x.data[idx].copy(), backward)


def spatial_softmax(x) -> Tensor:
    """Softmax over the two trailing (spatial) axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise _shape_error("spatial_softmax", f"need >= 2 dims, got {x.shape}")
    z = x.data - x.data.max(axis=(-2, -1), keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=(-2, -1), keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=(-2, -1), keepdims=True)
        return (out * (g - inner),)

    return _make("spatial_softmax", (x,), out, backward)


# ---------------------------------------------------------------------------
# image primitives (NCHW)


def _check_nchw(op, x):
    if x.ndim != 4:
        raise _shape_error(op, f"expected NCHW input, got {x.shape}")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation ``(N,C,H,W) * (O,C,kh,kw) -> (N,O,Ho,Wo)`` with zero padding."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check_nchw("conv2d", x)
    if stride not in (1, 2):
        raise _shape_error("conv2d", f"stride must be 1 or 2, got {stride}")
    if weight.ndim != 4 or weight.shape[1] != x.shape[1]:
        raise _shape_error("conv2d", f"weight {weight.shape} incompatible with input {x.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise _shape_error("conv2d", f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # cols: (N, Ho, Wo, C*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * kh * kw)
    wmat = weight.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).transpose(0, 3, 1, 2)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise _shape_error("conv2d", f"bias {bias.shape} does not match {o} output channels")
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)
    out = np.ascontiguousarray(out)
    need_x = x.requires_grad

    def backward(g):
        gt = g.transpose(0, 2, 3, 1)  # N,Ho,Wo,O
        gw = (gt.reshape(-1, o).T @ cols.reshape(-1, c * kh * kw)).reshape(weight.shape)
        gx = None
        if need_x:
            gcols = (gt @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros((n, c, hp, wp), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make("conv2d", inputs, out, backward)


def upsample2d(x, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling; the gradient sums each output block."""
    x = as_tensor(x)
    _check_nchw("upsample2d", x)
    f = int(factor)
    out = x.data.repeat(f, axis=2).repeat(f, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return _make("upsample2d", (x,), out, backward)


def maxpool2x2(x) -> Tensor:
    x = as_tensor(x)
    _check_nchw("maxpool2x2", x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise _shape_error("maxpool2x2", f"spatial size {h}x{w} not divisible by 2")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, h // 2, w // 2, 4), dtype=DTYPE)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _make("maxpool2x2", (x,), out, backward)


# ---------------------------------------------------------------------------
# custom primitives defined elsewhere (e.g. the rasterizer) go through here


def primitive(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward) -> Tensor:
    """Register a user-defined primitive with an explicit vector-Jacobian rule."""
    return _make(op, [as_tensor(t) for t in inputs], np.asarray(data, dtype=DTYPE), backward)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    checked: int
    max_rel_error: float
    max_abs_error: float
    tol: float
    passed: bool
    worst_index: tuple[int, ...] | None = None
    notes: list[str] = field(default_factory=list)

    def __str__(self) -> str:
        state = "PASS" if self.passed else "FAIL"
        return (
            f"{state}: {self.checked} elements, max rel err {self.max_rel_error:.3e} "
            f"(tol {self.tol:.1e}), max abs err {self.max_abs_error:.3e}"
        )


def check_gradient(
    loss_fn: Callable[[], Tensor],
    tensor: Tensor,
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare the analytic gradient of ``loss_fn()`` w.r.t. ``tensor`` with central differences.

    ``loss_fn`` must rebuild the computation from scratch on each call.  The
    relative error of an element is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if not tensor.requires_grad:
        return GradCheckReport(0, 0.0, 0.0, tol, True, notes=["tensor does not require grad; 0 elements checked"])
    saved_grad = tensor.grad
    tensor.zero_grad()
    graph = CompGraph(loss_fn)
    graph.evaluate()
    graph.backpropagate("output")
    analytic = np.array(tensor.grad, copy=True)
    tensor.grad = saved_grad

    flat = tensor.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_elements is not None and flat.size > max_elements:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))

    worst_rel, worst_abs, worst_at = 0.0, 0.0, None
    notes: list[str] = []
    ok = True
    with no_record():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = loss_fn().item()
            flat[i] = orig - step
            fm = loss_fn().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            if not (math.isfinite(num) and math.isfinite(a)):
                ok = False
                notes.append(f"non-finite gradient at flat index {i}")
                continue
            abs_err = abs(a - num)
            rel = abs_err / max(abs(a), abs(num), floor)
            if rel > worst_rel:
                worst_rel, worst_at = rel, np.unravel_index(i, tensor.shape)
            worst_abs = max(worst_abs, abs_err)
    passed = ok and worst_rel <= tol
    return GradCheckReport(len(idx), worst_rel, worst_abs, tol, passed, worst_at, notes)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
