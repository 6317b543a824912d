"""Float64 tensors with reverse-mode differentiation.

The op set is deliberately closed: matmul, softmax, layer_norm, the
elementwise suite (add, mul, scale, silu, reshape, transpose, concat,
split, sum, mse) and rotary application.  Everything the model needs is
composed from these.

Backward rules live in ``BACKWARD_RULES`` keyed by op name so that tests and
the verification suite can swap a rule out and confirm the gradient checks
notice.
"""

from __future__ import annotations

import builtins
import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "constant",
    "matmul",
    "softmax",
    "layer_norm",
    "add",
    "mul",
    "scale",
    "silu",
    "reshape",
    "transpose",
    "concat",
    "split",
    "sum",
    "mse",
    "rope_rotate",
    "backward",
    "topological_order",
    "finite_difference_check",
    "no_grad",
    "debug_mode",
    "mutated_rule",
    "BACKWARD_RULES",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_DEBUG = bool(os.environ.get("AVFD_DEBUG"))
_GRAD_ENABLED = True


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every op output for NaN/Inf while active."""
    global _DEBUG
    prev, _DEBUG = _DEBUG, enabled
    try:
        yield
    finally:
        _DEBUG = prev


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An n-d float64 array that may participate in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "ctx")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.ctx: dict | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    # Operator sugar; each maps onto a closed-set op.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], ctx: dict | None = None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out.op = op if needs else None
    out.parents = tuple(parents) if needs else ()
    out.ctx = ctx if needs else None
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- forward ops


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    return _make("matmul", _mm(a.data, b.data), (a, b))


def _mm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if y.ndim == 2 and x.ndim > 2:
        # one BLAS call instead of a stacked loop
        return (x.reshape(-1, x.shape[-1]) @ y).reshape(x.shape[:-1] + (y.shape[-1],))
    return np.matmul(x, y)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", y, (x,), {"y": y, "axis": axis})


def layer_norm(x, gain, bias, epsilon: float = 1e-5) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: gain {gain.shape}/bias {bias.shape} must be ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + epsilon)
    xhat = xc * rstd
    y = xhat * gain.data + bias.data
    return _make("layer_norm", y, (x, gain, bias), {"xhat": xhat, "rstd": rstd})


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make("add", a.data + b.data, (a, b))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make("mul", a.data * b.data, (a, b))


def scale(x, factor: float) -> Tensor:
    x = _as_tensor(x)
    return _make("scale", x.data * factor, (x,), {"factor": float(factor)})


def silu(x) -> Tensor:
    x = _as_tensor(x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make("silu", x.data * sig, (x,), {"sig": sig})


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        y = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make("reshape", np.ascontiguousarray(y), (x,))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for shape {x.shape}")
    y = np.ascontiguousarray(np.transpose(x.data, axes))
    return _make("transpose", y, (x,), {"axes": axes})


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: nothing to concatenate")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} differ off axis {axis}")
    y = np.concatenate([t.data for t in ts], axis=ax)
    return _make("concat", y, ts, {"axis": ax, "sizes": [t.shape[ax] for t in ts]})


def split(x, sizes: Sequence[int], axis: int) -> list[Tensor]:
    x = _as_tensor(x)
    ax = axis % x.ndim
    if builtins.sum(sizes) != x.shape[ax] or any(s < 0 for s in sizes):
        raise ShapeError(f"split: sizes {list(sizes)} do not tile axis {axis} of {x.shape}")
    out, start = [], 0
    for s in sizes:
        index = [slice(None)] * x.ndim
        index[ax] = slice(start, start + s)
        piece = np.ascontiguousarray(x.data[tuple(index)])
        out.append(_make("split", piece, (x,), {"axis": ax, "start": start, "stop": start + s}))
        start += s
    return out


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    return _make("sum", np.asarray(x.data.sum()), (x,))


def mse(a, b) -> Tensor:
    """Mean squared error over all elements, as a scalar tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    return _make("mse", np.asarray(np.mean(diff * diff)), (a, b), {"diff": diff})


def rope_rotate(x, angles: np.ndarray) -> Tensor:
    """Rotate consecutive channel pairs of ``x[..., L, H, D]`` by ``angles[L, D/2]``."""
    x = _as_tensor(x)
    angles = np.asarray(angles, dtype=np.float64)
    if x.ndim < 3 or x.shape[-1] % 2 or angles.shape != (x.shape[-3], x.shape[-1] // 2):
        raise ShapeError(f"rope_rotate: angles {angles.shape} do not fit tokens {x.shape}")
    cos = np.cos(angles)[:, None, :]
    sin = np.sin(angles)[:, None, :]
    y = _rotate_pairs(x.data, cos, sin)
    return _make("rope", y, (x,), {"cos": cos, "sin": sin})


def _rotate_pairs(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even, odd = x[..., 0::2], x[..., 1::2]
    y = np.empty_like(x)
    y[..., 0::2] = even * cos - odd * sin
    y[..., 1::2] = even * sin + odd * cos
    return y


# --------------------------------------------------------------- backward rules
# Each rule maps (upstream grad, output node) to one gradient per parent.


def _bw_matmul(g, out):
    a, b = out.parents
    ga = gb = None
    if a.requires_grad:
        ga = _unbroadcast(_mm(g, np.swapaxes(b.data, -1, -2)), a.shape)
    if b.requires_grad:
        if b.ndim == 2 and a.ndim > 2:
            # weight gradient: fold the batch dims into one contraction
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
    return ga, gb


def _bw_softmax(g, out):
    y, axis = out.ctx["y"], out.ctx["axis"]
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def _bw_layer_norm(g, out):
    x, gain, _ = out.parents
    xhat, rstd = out.ctx["xhat"], out.ctx["rstd"]
    lead = tuple(range(g.ndim - 1))
    ggain = (g * xhat).sum(axis=lead)
    gbias = g.sum(axis=lead)
    gx_hat = g * gain.data
    gx = rstd * (
        gx_hat
        - gx_hat.mean(axis=-1, keepdims=True)
        - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
    )
    return gx, ggain, gbias


def _bw_add(g, out):
    a, b = out.parents
    return (
        _unbroadcast(g, a.shape) if a.requires_grad else None,
        _unbroadcast(g, b.shape) if b.requires_grad else None,
    )


def _bw_mul(g, out):
    a, b = out.parents
    return (
        _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
        _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
    )


def _bw_scale(g, out):
    return (g * out.ctx["factor"],)


def _bw_silu(g, out):
    (x,) = out.parents
    sig = out.ctx["sig"]
    return (g * (sig * (1.0 + x.data * (1.0 - sig))),)


def _bw_reshape(g, out):
    return (g.reshape(out.parents[0].shape),)


def _bw_transpose(g, out):
    inv = np.argsort(out.ctx["axes"])
    return (np.transpose(g, inv),)


def _bw_concat(g, out):
    axis, sizes = out.ctx["axis"], out.ctx["sizes"]
    bounds = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _bw_split(g, out):
    (x,) = out.parents
    full = np.zeros_like(x.data)
    index = [slice(None)] * x.ndim
    index[out.ctx["axis"]] = slice(out.ctx["start"], out.ctx["stop"])
    full[tuple(index)] = g
    return (full,)


def _bw_sum(g, out):
    return (np.full(out.parents[0].shape, float(g)),)


def _bw_mse(g, out):
    diff = out.ctx["diff"]
    ga = g * 2.0 * diff / diff.size
    return ga, -ga


def _bw_rope(g, out):
    # inverse rotation
    return (_rotate_pairs(g, out.ctx["cos"], -out.ctx["sin"]),)


BACKWARD_RULES: dict[str, Callable] = {
    "matmul": _bw_matmul,
    "softmax": _bw_softmax,
    "layer_norm": _bw_layer_norm,
    "add": _bw_add,
    "mul": _bw_mul,
    "scale": _bw_scale,
    "silu": _bw_silu,
    "reshape": _bw_reshape,
    "transpose": _bw_transpose,
    "concat": _bw_concat,
    "split": _bw_split,
    "sum": _bw_sum,
    "mse": _bw_mse,
    "rope": _bw_rope,
}


@contextlib.contextmanager
def mutated_rule(op: str, factor: float = 1.5):
    """Temporarily corrupt the backward rule of ``op`` (mutation testing)."""
    original = BACKWARD_RULES[op]

    def corrupted(g, out):
        return tuple(None if gi is None else gi * factor for gi in original(g, out))

    BACKWARD_RULES[op] = corrupted
    try:
        yield
    finally:
        BACKWARD_RULES[op] = original


# ---------------------------------------------------------------------- graph


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, parents before children."""
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
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, BACKWARD_RULES[node.op](g, node)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ------------------------------------------------------------- gradient oracle


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-4,
    n_coords: int = 64,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` takes no arguments and recomputes a scalar loss from the current
    contents of ``params``.  Coordinates are subsampled uniformly across all
    parameters (at least ``n_coords`` unless fewer exist).  The relative error
    of one coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_ids = np.arange(total) if total <= n_coords else rng.choice(total, size=n_coords, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    with no_grad():
        for fid in np.sort(flat_ids):
            pi = int(np.searchsorted(offsets, fid, side="right") - 1)
            idx = int(fid - offsets[pi])
            flat = params[pi].data.reshape(-1)
            orig = flat[idx]
            flat[idx] = orig + step
            up = float(f().data)
            flat[idx] = orig - step
            down = float(f().data)
            flat[idx] = orig
            numeric = (up - down) / (2.0 * step)
            a = float(analytic[pi].reshape(-1)[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
