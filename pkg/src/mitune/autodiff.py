"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records a closure that pushes the output gradient back to its
inputs. Nodes whose inputs all have ``requires_grad=False`` keep no parents
and no closure, so frozen sub-graphs cost nothing at backward time.

An optional allocation tracker (see :func:`track_allocations`) counts every
float produced by an op, tagged by op kind. The cost benchmarks use it to
compare measured activation sizes against closed-form counters.
"""
from __future__ import annotations

import contextlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


# --------------------------------------------------------------------------
# allocation tracking


@dataclass
class AllocationLog:
    floats: Counter = field(default_factory=Counter)
    events: int = 0

    @property
    def total(self) -> int:
        return int(sum(self.floats.values()))


_tracker: list[AllocationLog] = []
_grad_enabled = [True]


@contextlib.contextmanager
def track_allocations():
    log = AllocationLog()
    _tracker.append(log)
    try:
        yield log
    finally:
        _tracker.pop()


@contextlib.contextmanager
def no_grad():
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


def _record(op: str, size: int) -> None:
    for log in _tracker:
        log.floats[op] += size
        log.events += 1


# --------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor shapes must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # construction helpers ------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str, backward=None):
        out = cls.__new__(cls)
        out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
        out.grad = None
        out.name = None
        out.op = op
        needs = _grad_enabled[-1] and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        # views share their parent's buffer and allocate nothing
        if _tracker and not any(np.may_share_memory(out.data, p.data) for p in parents):
            _record(op, out.data.size)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad}{tag})"

    # arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    # method forms --------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def softmax(self, axis=-1):
        return softmax(self, axis)

    def sigmoid(self):
        return sigmoid(self)

    # backward ------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every trainable leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got {t.shape}")


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# --------------------------------------------------------------------------
# broadcasting helpers


def _broadcast_shape(kind: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a} and {b}") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# element-wise binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), "div", backward)


def matmul(a, b, tag: str = "matmul") -> Tensor:
    """Batched matrix product following numpy's ``@`` broadcasting rules."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim == 1:
        if a.shape != b.shape:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return sum_(mul(a, b))
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + b.shape[-1:])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), tag, backward)


def maximum(a, floor: float) -> Tensor:
    """Clamp from below by a constant; the gradient is zero where clamped. NaN propagates."""
    a = as_tensor(a)
    keep = ~(a.data < floor)

    def backward(g):
        return (g * keep,)

    return Tensor._from_op(np.where(keep, a.data, floor), (a,), "maximum", backward)


# --------------------------------------------------------------------------
# element-wise unary ops


def power(a, p: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * p * a.data ** (p - 1),)

    return Tensor._from_op(a.data**p, (a,), "pow", backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return Tensor._from_op(out, (a,), "exp", backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g / a.data,)

    return Tensor._from_op(np.log(a.data), (a,), "log", backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return Tensor._from_op(out, (a,), "sqrt", backward)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    r = 1.0 / (1.0 + e)
    return np.where(x >= 0, r, e * r)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, (a,), "sigmoid", backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0

    def backward(g):
        return (g * pos,)

    return Tensor._from_op(a.data * pos, (a,), "relu", backward)


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)

    def backward(g):
        return (g * (s * (1.0 + a.data * (1.0 - s))),)

    return Tensor._from_op(a.data * s, (a,), "silu", backward)


# --------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return Tensor._from_op(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), "sum", backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return Tensor._from_op(np.asarray(a.data.mean(axis=axes, keepdims=keepdims)), (a,), "mean", backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (a,), "softmax", backward)


def masked_softmax(a, mask, scale: float = 1.0) -> Tensor:
    """``softmax(scale * a)`` over the last axis with ``mask``-True entries excluded.

    Fully masked rows produce zeros rather than NaN.
    """
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if np.broadcast_shapes(a.shape, mask.shape) != a.shape:
        raise ShapeError(f"masked_softmax: mask {mask.shape} does not broadcast to {a.shape}")
    z = np.where(mask, -np.inf, a.data * scale)
    zmax = z.max(axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    tot = e.sum(axis=-1, keepdims=True)
    out = e / np.where(tot > 0, tot, 1.0)

    def backward(g):
        return (scale * out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(out, (a,), "attn_softmax", backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (a,), "log_softmax", backward)


# --------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return Tensor._from_op(out, (a,), "reshape", backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return Tensor._from_op(a.data.transpose(axes), (a,), "transpose", backward)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    _broadcast_shape("broadcast_to", a.shape, shape)

    def backward(g):
        return (_unbroadcast(g, a.shape),)

    return Tensor._from_op(np.broadcast_to(a.data, shape).copy(), (a,), "broadcast_to", backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: nothing to concatenate")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            i != ax and m != n for i, (m, n) in enumerate(zip(t.shape, ts[0].shape))
        ):
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for i in range(len(ts)):
            idx[ax] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(idx)])
        return parts

    return Tensor._from_op(np.concatenate([t.data for t in ts], axis=ax), ts, "concat", backward)


def _is_advanced(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def slice_(a, key) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate gradient."""
    a = as_tensor(a)
    try:
        out = a.data[key]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {a.shape}") from None
    advanced = _is_advanced(key)

    def backward(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, key, g)
        else:
            full[key] += g
        return (full,)

    # basic indexing stays a view of the parent buffer
    out = np.array(out, dtype=DTYPE) if advanced or np.ndim(out) == 0 else out
    return Tensor._from_op(out, (a,), "slice", backward)


def take_rows(table, ids) -> Tensor:
    """Row gather ``table[ids]`` (embedding lookup)."""
    return slice_(table, np.asarray(ids, dtype=np.int64))


def masked_fill(a, mask, value: float) -> Tensor:
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    _broadcast_shape("masked_fill", a.shape, mask.shape)
    if np.broadcast_shapes(a.shape, mask.shape) != a.shape:
        raise ShapeError(f"masked_fill: mask {mask.shape} does not broadcast to {a.shape}")

    def backward(g):
        return (np.where(mask, 0.0, g),)

    return Tensor._from_op(np.where(mask, value, a.data), (a,), "masked_fill", backward)


def upsample_nearest(a, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of a ``(..., H, W, C)`` map."""
    a = as_tensor(a)
    *lead, h, w, c = a.shape
    x = reshape(a, (*lead, h, 1, w, 1, c))
    x = broadcast_to(x, (*lead, h, factor, w, factor, c))
    return reshape(x, (*lead, h * factor, w * factor, c))


# --------------------------------------------------------------------------
# composite ops


def rms_norm(x, weight, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x^2) + eps) * weight`` over the last axis, as one op."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.shape != x.shape[-1:]:
        raise ShapeError(f"rms_norm: weight {weight.shape} does not match features {x.shape[-1:]}")
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    xr = x.data * r
    out = xr * weight.data

    def backward(g):
        gw = g * weight.data
        gx = r * (gw - xr * np.mean(gw * xr, axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xr, weight.shape)

    return Tensor._from_op(out, (x, weight), "rms_norm", backward)


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else y + b


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict[str, float]
    tol: float
    checked: dict[str, int]
    frozen_grad: dict[str, float] = field(default_factory=dict)
    mode: str = "entry"
    per_entry: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.per_param.items() if v > self.tol]

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_rel_err:.3e} tol={self.tol:g}"


class NonFiniteError(FloatingPointError):
    pass


def rel_err(a, f) -> np.ndarray:
    a, f = np.asarray(a), np.asarray(f)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[Tensor],
    step: float = 1e-6,
    tol: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
    mode: str = "entry",
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` closes over ``params`` and rebuilds the graph on every call. Each
    parameter is perturbed in place. Frozen tensors (``requires_grad=False``)
    are not differenced; ``frozen_grad`` reports their max |gradient|, which
    the engine guarantees is exactly zero.
    When ``max_entries`` is set, a seeded random subsample of at most that
    many entries is checked per tensor (all entries if the tensor is smaller).

    ``mode="entry"`` gates on the worst per-entry relative error.
    ``mode="tensor"`` gates on ``|a - f| / max(|a|, |f|)`` over each tensor's
    checked entries (2-norms), which stays meaningful when individual
    entries sit at the finite-difference noise floor.
    """
    if mode not in ("entry", "tensor"):
        raise ValueError("mode must be 'entry' or 'tensor'")
    if step <= 0:
        raise ValueError("step must be positive")
    if not isinstance(params, dict):
        params = {p.name or f"param{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("f(params) is not finite at the unperturbed point")
    loss.backward()
    rng = np.random.Generator(np.random.PCG64(seed))

    per_param: dict[str, float] = {}
    per_entry: dict[str, float] = {}
    checked: dict[str, int] = {}
    frozen: dict[str, float] = {}
    for name, p in params.items():
        if not p.requires_grad:
            frozen[name] = 0.0 if p.grad is None else float(np.abs(p.grad).max())
            continue
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        fds = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError(f"f is not finite when perturbing {name}[{i}]")
            fd = fds[j] = (up - down) / (2 * step)
            worst = max(worst, float(rel_err(analytic.reshape(-1)[i], fd)))
        per_entry[name] = worst
        per_param[name] = _norm_rel(analytic.reshape(-1)[idx], fds) if mode == "tensor" else worst
        checked[name] = int(idx.size)
    max_err = max(per_param.values(), default=0.0)
    return GradCheckReport(max_err, per_param, tol, checked, frozen, mode, per_entry)


def _norm_rel(a: np.ndarray, f: np.ndarray) -> float:
    return float(np.linalg.norm(a - f) / max(np.linalg.norm(a), np.linalg.norm(f), 1e-8))
