"""Dense tensors with tape-based reverse-mode differentiation.

Every operation records its inputs and a local backward rule on the output
tensor. ``backward`` replays the recorded operations in reverse creation
order, which is a valid reverse topological order because an operation's
inputs always exist before its output.

Arrays carry an optional leading batch shape; all "row" operations act on the
last two axes, so a ``(B, M, D)`` tensor is a batch of ``M x D`` matrices.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

__all__ = [
    "DimensionError",
    "NonFiniteError",
    "UsageError",
    "Tensor",
    "tensor",
    "parameter",
    "no_grad",
    "grad_enabled",
    "set_default_dtype",
    "get_default_dtype",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "softmax_rows",
    "concat",
    "concat_rows",
    "stack",
    "mean_pool_rows",
    "sum",
    "reshape",
    "transpose",
    "take",
    "index",
    "cross_entropy",
    "conv2d",
    "avg_pool2d",
    "lstm_state",
    "lstm_hidden",
    "backward",
    "zero_grad",
    "GradCheckReport",
    "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str, where: str = "forward"):
        super().__init__(f"non-finite values produced by '{op}' ({where})")
        self.op = op


class UsageError(RuntimeError):
    """An operation was called outside its contract."""


_ids = itertools.count()
_grad_enabled = True
_default_dtype = np.float64
_check_finite = True


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


def grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad():
    """Evaluate without recording backward rules."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def finite_checks(enabled: bool):
    global _check_finite
    prev = _check_finite
    _check_finite = enabled
    try:
        yield
    finally:
        _check_finite = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_default_dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self._id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
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
        if self.data.size != 1:
            raise UsageError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.array(data, dtype=dtype or _default_dtype)
    return Tensor(arr, requires_grad=requires_grad)


def parameter(data, name: str | None = None) -> Tensor:
    arr = np.array(data, dtype=_default_dtype)
    return Tensor(arr, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    if _check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match") from None


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(a.data - b.data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), rule, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a constant scalar."""
    s = float(s)

    def rule(g):
        return (g * s,)

    return _result(a.data * s, (a,), rule, "scale")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def rule(g):
        return (g * (1.0 - y * y),)

    return _result(y, (a,), rule, "tanh")


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    # keep the open interval even where the float type saturates
    info = np.finfo(x.dtype)
    return np.clip(y, info.tiny, 1.0 - info.epsneg)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_values(a.data)

    def rule(g):
        return (g * y * (1.0 - y),)

    return _result(y, (a,), rule, "sigmoid")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)  # non-positive inputs are reported by the finite check
    return _result(y, (a,), lambda g: (g / x,), "log")


# --------------------------------------------------------------------------
# linear algebra and reductions
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast") from None

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), rule, "matmul")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is None:
            g = g.reshape(())
        elif not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), rule, "sum")


def mean_pool_rows(a: Tensor) -> Tensor:
    """Column-wise mean over the row axis; ``(.., m, n) -> (.., 1, n)``."""
    if a.ndim < 2 or a.shape[-2] == 0 or a.shape[-1] == 0:
        raise DimensionError(f"mean_pool_rows: cannot pool empty tensor of shape {a.shape}")
    m = a.shape[-2]

    def rule(g):
        return (np.broadcast_to(g / m, a.shape).copy(),)

    return _result(a.data.mean(axis=-2, keepdims=True), (a,), rule, "mean_pool_rows")


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max-subtraction.

    ``mask`` (broadcastable to ``a``) marks admissible entries; masked entries
    get exactly zero weight and receive no gradient.
    """
    x = a.data
    if mask is None:
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(keep.any(axis=-1)):
            raise UsageError("softmax_rows: a row has every entry masked")
        xm = np.where(keep, x, -np.inf)
        z = np.where(keep, x - xm.max(axis=-1, keepdims=True), 0.0)
        e = np.where(keep, np.exp(z), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (a,), rule, "softmax_rows")


# --------------------------------------------------------------------------
# shape manipulation
# --------------------------------------------------------------------------


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat: empty list of parts")
    nd = parts[0].ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.ndim != nd or any(p.shape[i] != parts[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat: part shape {p.shape} incompatible with {parts[0].shape} on axis {axis}")
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def rule(g):
        sl = [slice(None)] * nd
        out = []
        for i in range(len(parts)):
            sl[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return _result(np.concatenate([p.data for p in parts], axis=ax), parts, rule, "concat")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Vertical stack of ``(.., r_i, D)`` tensors into ``(.., sum r_i, D)``."""
    if not parts:
        raise DimensionError("concat_rows: empty list of parts")
    d = parts[0].shape[-1]
    for p in parts:
        if p.shape[-1] != d:
            raise DimensionError(f"concat_rows: column counts differ ({d} vs {p.shape[-1]})")
    if len(parts) == 1:
        return parts[0]
    return concat(parts, axis=-2)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    shape = parts[0].shape
    for p in parts:
        if p.shape != shape:
            raise DimensionError(f"stack: shape {p.shape} differs from {shape}")
    ax = axis % (len(shape) + 1)

    def rule(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(parts)))

    return _result(np.stack([p.data for p in parts], axis=ax), parts, rule, "stack")


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


class _Scatter:
    """Sparse gradient: ``g`` belongs at ``idx`` of an otherwise-zero array."""

    __slots__ = ("idx", "g", "basic")

    def __init__(self, idx, g, basic):
        self.idx, self.g, self.basic = idx, g, basic

    def add_into(self, target: np.ndarray) -> None:
        if self.basic:
            target[self.idx] += self.g
        else:
            np.add.at(target, self.idx, self.g)


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def index(a: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; gradient scatters back with accumulation."""
    out = a.data[idx]
    out_shape = np.shape(out)
    basic = _is_basic(idx)

    def rule(g):
        return (_Scatter(idx, g.reshape(out_shape), basic),)

    return _result(np.array(out), (a,), rule, "index")


def take(table: Tensor, ids, axis: int = 0) -> Tensor:
    """Row lookup ``table[ids]`` along ``axis`` (embedding gather)."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise IndexError("take: ids must be integers")
    n = table.shape[axis]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = ids[(ids < 0) | (ids >= n)].reshape(-1)[0]
        raise IndexError(f"take: id {int(bad)} out of range [0, {n})")
    out = np.take(table.data, ids, axis=axis)

    def rule(g):
        full = np.zeros_like(table.data)
        if axis == 0:
            np.add.at(full, ids, g)
        else:
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, ids, np.moveaxis(g, tuple(range(axis, axis + ids.ndim)),
                                               tuple(range(ids.ndim))))
        return (full,)

    return _result(out, (table,), rule, "take")


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


def cross_entropy(probs: Tensor, targets, mask=None, atol: float = 1e-6) -> Tensor:
    """Masked mean negative log-likelihood of ``targets`` under ``probs``.

    ``probs`` is ``(.., T, E)`` with rows summing to one; ``targets`` and
    ``mask`` are ``(.., T)``. Positions with mask 0 contribute nothing.
    """
    p = probs.data
    targets = np.asarray(targets)
    e = p.shape[-1]
    if targets.shape != p.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {targets.shape} vs probabilities {p.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= e):
        raise IndexError(f"cross_entropy: target outside vocabulary [0, {e})")
    mask = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=p.dtype)
    if mask.shape != targets.shape:
        raise DimensionError(f"cross_entropy: mask {mask.shape} vs targets {targets.shape}")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > atol):
        raise ValueError("cross_entropy: probability rows must sum to 1")
    total = mask.sum()
    if total <= 0:
        raise UsageError("cross_entropy: mask selects no positions")
    picked = np.take_along_axis(p, targets[..., None], axis=-1)[..., 0]
    with np.errstate(divide="ignore"):
        logp = np.where(mask > 0, np.log(np.where(mask > 0, picked, 1.0)), 0.0)
    loss = -(mask * logp).sum() / total

    def rule(g):
        full = np.zeros_like(p)
        vals = np.where(mask > 0, -mask / (total * np.where(mask > 0, picked, 1.0)), 0.0)
        np.put_along_axis(full, targets[..., None], vals[..., None], axis=-1)
        return (full * g.reshape(()),)

    return _result(np.array([loss], dtype=p.dtype), (probs,), rule, "cross_entropy")


# --------------------------------------------------------------------------
# fused kernels
# --------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor, pad: int = 1) -> Tensor:
    """Stride-1 2-D cross-correlation; ``x`` is ``(B, C, H, W)``."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    out = _kernels.conv2d_forward(x.data, w.data, b.data, pad)

    def rule(g):
        dx, dw, db = _kernels.conv2d_backward(x.data, w.data, g, pad)
        return dx, dw, db

    return _result(out, (x, w, b), rule, "conv2d")


def avg_pool2d(x: Tensor, f: int) -> Tensor:
    B, C, H, W = x.shape
    if H % f or W % f:
        raise DimensionError(f"avg_pool2d: spatial size {(H, W)} not divisible by {f}")
    out = x.data.reshape(B, C, H // f, f, W // f, f).mean(axis=(3, 5))

    def rule(g):
        up = np.repeat(np.repeat(g, f, axis=2), f, axis=3) / (f * f)
        return (up,)

    return _result(out, (x,), rule, "avg_pool2d")


def lstm_state(gates: Tensor, c_prev: Tensor) -> Tensor:
    """Cell update ``c = sig(f) * c_prev + sig(i) * tanh(g)`` from ``[i|f|g|o]`` gates."""
    if gates.shape[-1] != 4 * c_prev.shape[-1] or gates.shape[:-1] != c_prev.shape[:-1]:
        raise DimensionError(f"lstm_state: gates {gates.shape} vs cell {c_prev.shape}")
    out = _kernels.lstm_state_forward(gates.data, c_prev.data)

    def rule(g):
        return _kernels.lstm_state_backward(gates.data, c_prev.data, g)

    return _result(out, (gates, c_prev), rule, "lstm_state")


def lstm_hidden(gates: Tensor, c: Tensor) -> Tensor:
    """Hidden output ``h = sig(o) * tanh(c)``."""
    if gates.shape[-1] != 4 * c.shape[-1] or gates.shape[:-1] != c.shape[:-1]:
        raise DimensionError(f"lstm_hidden: gates {gates.shape} vs cell {c.shape}")
    out = _kernels.lstm_hidden_forward(gates.data, c.data)

    def rule(g):
        return _kernels.lstm_hidden_backward(gates.data, c.data, g)

    return _result(out, (gates, c), rule, "lstm_hidden")


# --------------------------------------------------------------------------
# reverse pass
# --------------------------------------------------------------------------


def _collect(root: Tensor) -> list[Tensor]:
    seen = {root._id}
    nodes = [root]
    stack_ = [root]
    while stack_:
        t = stack_.pop()
        for p in t._parents:
            if p.requires_grad and p._id not in seen:
                seen.add(p._id)
                nodes.append(p)
                stack_.append(p)
    nodes.sort(key=lambda t: t._id, reverse=True)
    return nodes


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every reachable tensor."""
    if root.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    pending = {root._id: np.ones_like(root.data)}
    for node in _collect(root):
        g = pending.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        node.grad = g if node.grad is None else node.grad + g
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if isinstance(pg, _Scatter):
                if _check_finite and not np.all(np.isfinite(pg.g)):
                    raise NonFiniteError(node.op, "backward")
                acc = pending.get(parent._id)
                if acc is None:
                    acc = pending[parent._id] = np.zeros_like(parent.data)
                pg.add_into(acc)
                continue
            if _check_finite and not np.all(np.isfinite(pg)):
                raise NonFiniteError(node.op, "backward")
            acc = pending.get(parent._id)
            if acc is None:
                pending[parent._id] = np.array(pg, dtype=parent.data.dtype)
            else:
                acc += pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad[...] = 0.0


# --------------------------------------------------------------------------
# finite-difference oracle
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    passed: bool
    tolerance: float
    max_rel_error: float
    per_param: dict = field(default_factory=dict)
    worst: dict = field(default_factory=dict)
    checked: int = 0
    error: str | None = None

    def failures(self) -> list[str]:
        return [name for name, err in self.per_param.items() if not err <= self.tolerance]

    def summary(self) -> str:
        lines = [f"grad_check {'PASS' if self.passed else 'FAIL'}: max rel err "
                 f"{self.max_rel_error:.3e} (tol {self.tolerance:.0e}, {self.checked} entries)"]
        if self.error:
            lines.append(f"  error: {self.error}")
        for name, err in self.per_param.items():
            flag = "ok" if err <= self.tolerance else "FAIL"
            where = self.worst.get(name)
            lines.append(f"  {name}: {err:.3e} {flag}" + (f" at {where}" if where else ""))
        return "\n".join(lines)


def grad_check(
    f: Callable[[], Tensor],
    params: dict | Sequence[Tensor],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``params`` maps names to leaf tensors (or is a plain sequence). With
    ``max_entries`` set, each parameter is checked on that many randomly chosen
    entries instead of exhaustively. Relative error per entry is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not isinstance(params, dict):
        params = {p.name or f"param{i}": p for i, p in enumerate(params)}
    rng = np.random.default_rng(seed)
    report = GradCheckReport(passed=False, tolerance=tolerance, max_rel_error=float("nan"))
    try:
        zero_grad(params.values())
        loss = f()
        backward(loss)
    except NonFiniteError as exc:
        report.error = str(exc)
        return report
    analytic = {name: p.grad.copy() for name, p in params.items()}

    def evaluate() -> float:
        with no_grad():
            return f().item()

    worst_overall = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            picks = rng.choice(n, size=max_entries, replace=False)
        else:
            picks = np.arange(n)
        worst, worst_at = 0.0, None
        for k in picks:
            orig = flat[k]
            try:
                flat[k] = orig + epsilon
                fp = evaluate()
                flat[k] = orig - epsilon
                fm = evaluate()
            except NonFiniteError as exc:
                report.error = f"{name}[{k}]: {exc}"
                flat[k] = orig
                return report
            finally:
                flat[k] = orig
            num = (fp - fm) / (2.0 * epsilon)
            ana = analytic[name].reshape(-1)[k]
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            if rel > worst or worst_at is None:
                worst, worst_at = rel, np.unravel_index(k, p.shape)
            report.checked += 1
        report.per_param[name] = worst
        report.worst[name] = tuple(int(i) for i in worst_at) if worst_at is not None else None
        worst_overall = max(worst_overall, worst)
    report.max_rel_error = worst_overall
    report.passed = worst_overall <= tolerance
    return report
