"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a row-major ``numpy.float64`` array. Every operation
whose inputs require gradients records a node (operation name, parents and a
backward rule). :func:`backward` linearises the reachable graph into a
:class:`Tape` in topological order and replays it in reverse.

Only the operations needed by the mixture-of-experts networks and their
losses are provided: elementwise arithmetic with broadcasting, matmul,
reductions, indexing, relu/exp/log/sqrt, row softmax, valid 2-D
cross-correlation and 2x2 max pooling.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "backward",
    "grad_check",
    "no_grad",
    "matmul",
    "conv2d_valid",
    "maxpool2",
    "relu",
    "row_softmax",
    "stack",
    "log",
    "exp",
    "sqrt",
    "clamp_min",
]

_ids = itertools.count()
_state = threading.local()  # graph recording is switched per thread


def _recording() -> bool:
    return getattr(_state, "enabled", True)


def _log_branch(choice: np.ndarray) -> None:
    # grad_check(skip_kinks=True) compares these across probe points
    log = getattr(_state, "branches", None)
    if log is not None:
        log.append(choice)


@contextlib.contextmanager
def _branch_recorder():
    prev = getattr(_state, "branches", None)
    _state.branches = log = []
    try:
        yield log
    finally:
        _state.branches = prev


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape_id", "op", "parents", "_backward")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, copy=True) if not (
            isinstance(data, np.ndarray) and data.dtype == np.float64
        ) else data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_id = next(_ids)
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic properties -------------------------------------------------
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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __rtruediv__(self, other):
        return mul(_as_tensor(other), power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], op: str, rule) -> Tensor:
    out = Tensor(data)
    if _recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = parents
        out._backward = rule
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    return _node(data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    return _node(data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), "neg", lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    return _node(a.data ** exponent, (a,), "pow",
                 lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0, not inf."""
    out = np.sqrt(a.data)

    def rule(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return _node(out, (a,), "sqrt", rule)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    mask = a.data >= floor
    _log_branch(mask)
    return _node(np.maximum(a.data, floor), (a,), "clamp_min", lambda g: (g * mask,))


def relu(x: Tensor) -> Tensor:
    """max(0, x) elementwise; the subgradient at 0 is 0."""
    mask = x.data > 0
    _log_branch(mask)
    return _node(x.data * mask, (x,), "relu", lambda g: (g * mask,))


# -- shape / reduction ----------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(data, dtype=np.float64), (a,), "sum", rule)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _node(a.data.T, (a,), "transpose", lambda g: (g.T,))


def getitem(a: Tensor, index) -> Tensor:
    def rule(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _node(np.array(a.data[index], dtype=np.float64), (a,), "getitem", rule)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack needs equal shapes, got {sorted(shapes)}")
    data = np.stack([t.data for t in tensors], axis=axis)

    def rule(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(data, tensors, "stack", rule)


# -- linear algebra -------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), "matmul",
                 lambda g: (g @ b.data.T, a.data.T @ g))


def row_softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, (x,), "row_softmax", rule)


def conv2d_valid(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1, unpadded cross-correlation (no kernel flip) plus bias.

    x: N x C x H x W, kernel: F x C x k x k, bias: F.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d_valid expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"kernel channels {kc} do not match input channels {c}")
    if kh > h or kw > w:
        raise DimensionError(f"kernel {kernel.shape} larger than input {x.shape}")
    if bias.shape != (f,):
        raise DimensionError(f"bias shape {bias.shape} does not match {f} filters")
    ho, wo = h - kh + 1, w - kw + 1
    xd, kd = x.data, kernel.data
    # sum of k*k shifted views, each contracted over input channels
    single = f == 1 and c == 1  # the common case here: plain scalar weights per offset
    if single:
        out = np.full((n, 1, ho, wo), bias.data[0])
        tmp = np.empty_like(out)
        for i in range(kh):
            for j in range(kw):
                np.multiply(xd[:, :, i:i + ho, j:j + wo], kd[0, 0, i, j], out=tmp)
                out += tmp
    else:
        out = np.zeros((f, n, ho, wo))
        for i in range(kh):
            for j in range(kw):
                out += np.tensordot(kd[:, :, i, j], xd[:, :, i:i + ho, j:j + wo], axes=([1], [1]))
        out += bias.data[:, None, None, None]
        out = out.transpose(1, 0, 2, 3)

    def rule(g):
        dk = np.empty_like(kd)
        dx = np.zeros_like(xd) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                xs = xd[:, :, i:i + ho, j:j + wo]
                if single:
                    dk[0, 0, i, j] = np.einsum("nchw,nchw->", g, xs)
                    if dx is not None:
                        dx[:, :, i:i + ho, j:j + wo] += kd[0, 0, i, j] * g
                else:
                    dk[:, :, i, j] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
                    if dx is not None:
                        dx[:, :, i:i + ho, j:j + wo] += np.tensordot(
                            g, kd[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        db = g.sum(axis=(0, 2, 3))
        return dx, dk, db

    return _node(np.ascontiguousarray(out), (x, kernel, bias), "conv2d_valid", rule)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    Ties route the gradient to the first cell of the window in row-major order.
    """
    if x.ndim != 4:
        raise DimensionError(f"maxpool2 expects N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise DimensionError(f"maxpool2 needs H, W >= 2, got {x.shape}")
    ph, pw = h // 2, w // 2
    win = x.data[:, :, :2 * ph, :2 * pw].reshape(n, c, ph, 2, pw, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ph, pw, 4)
    idx = win.argmax(axis=-1)[..., None]
    _log_branch(idx)
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def rule(g):
        gw = np.zeros((n, c, ph, pw, 4))
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        gw = gw.reshape(n, c, ph, pw, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ph, 2 * pw)
        dx = np.zeros_like(x.data)
        dx[:, :, :2 * ph, :2 * pw] = gw
        return (dx,)

    return _node(out, (x,), "maxpool2", rule)


# -- backward pass --------------------------------------------------------
class Tape:
    """Recorded operations reachable from a root, in topological order."""

    def __init__(self, entries: list[Tensor]):
        self.entries = entries

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if node.tape_id in seen:
                continue
            seen.add(node.tape_id)
            stack_.append((node, True))
            for p in node.parents:
                if p.requires_grad and p.tape_id not in seen:
                    stack_.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable t."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not attached to any tensor that requires grad")
    tape = Tape.from_root(loss)
    pending: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
    for node in reversed(tape.entries):
        g = pending.pop(node.tape_id, None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.tape_id in pending:
                pending[parent.tape_id] = pending[parent.tape_id] + pg
            else:
                pending[parent.tape_id] = pg


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
    skip_kinks: bool = False,
    stats: dict | None = None,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    The relative gap per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    ``max_coords`` caps how many coordinates of each parameter are probed
    (chosen with ``rng``); ``None`` probes all of them.

    With ``skip_kinks`` a coordinate is left out when the probe interval
    crosses a non-differentiable point, detected exactly by comparing the
    relu / clamp_min / maxpool2 branch choices at x - step, x and x + step.
    ``stats`` (if given) receives ``checked`` and ``skipped`` counts.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    with _branch_recorder() as base_branches:
        loss = f()
    if loss.requires_grad:
        backward(loss)
    checked = skipped = 0
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError("grad_check needs contiguous parameter buffers")
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            with no_grad(), _branch_recorder() as up_branches:
                flat[i] = orig + step
                up = f().item()
            with no_grad(), _branch_recorder() as down_branches:
                flat[i] = orig - step
                down = f().item()
            flat[i] = orig
            if skip_kinks and not (_same_branches(base_branches, up_branches)
                                   and _same_branches(base_branches, down_branches)):
                skipped += 1
                continue
            checked += 1
            numeric = (up - down) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), floor)
            worst = max(worst, abs(a - numeric) / denom)
    for p in params:
        p.grad = None
    if stats is not None:
        stats["checked"] = stats.get("checked", 0) + checked
        stats["skipped"] = stats.get("skipped", 0) + skipped
    return worst


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))
