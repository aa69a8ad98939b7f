"""Dense tensors with reverse-mode differentiation over a closed primitive set.

Every loss in the package (allocation, rounding reconstruction, contrastive
alignment, detector training) is written in terms of the primitives below, so
a single finite-difference checker covers all of them.

Elementwise primitives accept operands of identical shape, or one operand of
size 1 which is treated as a scalar. Nothing else broadcasts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

__all__ = [
    "Tensor",
    "GradRecord",
    "GradCheckReport",
    "PRIMITIVES",
    "apply_primitive",
    "backward",
    "check_gradients",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "tsum",
    "mean",
    "clamp",
    "tabs",
    "tpow",
    "softmax",
    "l2_normalize",
    "cosine_similarity",
    "rows_to_matrix",
    "tile_rows",
]

NORM_EPS = 1e-12


@dataclass(eq=False)
class GradRecord:
    op: str
    inputs: tuple
    saved: dict
    attrs: dict


class Tensor:
    """Immutable dense array node in a differentiation graph.

    ``data`` is stored as a numpy array; a tensor produced by a primitive whose
    inputs require gradients carries a :class:`GradRecord` in ``record``.
    """

    __slots__ = ("data", "requires_grad", "record", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=np.float64, name=None):
        arr = np.array(data, dtype=dtype)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ContractError("tensor extents must be >= 1")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.record: Optional[GradRecord] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return tpow(self, p)


def tensor(data, requires_grad=False, dtype=np.float64):
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad, dtype)


# --------------------------------------------------------------------------
# primitive rules: forward(values, attrs) -> (out, saved)
#                  backward(grad_out, values, out, saved, attrs) -> grads
# --------------------------------------------------------------------------


def _elementwise_shape(a, b):
    if a.shape == b.shape:
        return a.shape
    if a.size == 1:
        return b.shape
    if b.size == 1:
        return a.shape
    raise DimensionError(f"elementwise shapes {a.shape} and {b.shape} do not conform")


def _reduce_to(grad, like):
    """Fold an elementwise gradient back onto an operand that acted as a scalar."""
    if grad.shape == like.shape:
        return grad
    return np.full(like.shape, grad.sum(), dtype=grad.dtype)


def _fw_add(v, a):
    _elementwise_shape(*v)
    return v[0] + v[1], None


def _bw_add(g, v, out, saved, a):
    return _reduce_to(g, v[0]), _reduce_to(g, v[1])


def _fw_sub(v, a):
    _elementwise_shape(*v)
    return v[0] - v[1], None


def _bw_sub(g, v, out, saved, a):
    return _reduce_to(g, v[0]), _reduce_to(-g, v[1])


def _fw_mul(v, a):
    _elementwise_shape(*v)
    return v[0] * v[1], None


def _bw_mul(g, v, out, saved, a):
    return _reduce_to(g * v[1], v[0]), _reduce_to(g * v[0], v[1])


def _fw_div(v, a):
    _elementwise_shape(*v)
    if np.any(v[1] == 0):
        raise DomainError("division by zero")
    return v[0] / v[1], None


def _bw_div(g, v, out, saved, a):
    return _reduce_to(g / v[1], v[0]), _reduce_to(-g * v[0] / (v[1] * v[1]), v[1])


def _as_matrices(x, y, attrs):
    if x.ndim not in (1, 2) or y.ndim not in (1, 2):
        raise DimensionError("matmul operands must be 1-D or 2-D")
    a2 = x if x.ndim == 2 else x[None, :]
    b2 = y if y.ndim == 2 else y[:, None]
    if attrs.get("transpose_a"):
        a2 = a2.T
    if attrs.get("transpose_b"):
        b2 = b2.T
    if a2.shape[1] != b2.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a2.shape} @ {b2.shape}")
    return a2, b2


def _fw_matmul(v, attrs):
    x, y = v
    a2, b2 = _as_matrices(x, y, attrs)
    out = a2 @ b2
    if x.ndim == 1:
        out = out[0]
    if y.ndim == 1:
        out = out[..., 0]
    return out, None


def _bw_matmul(g, v, out, saved, attrs):
    x, y = v
    a2, b2 = _as_matrices(x, y, attrs)
    g2 = g.reshape(a2.shape[0], b2.shape[1])
    da2 = g2 @ b2.T
    db2 = a2.T @ g2
    if attrs.get("transpose_a"):
        da2 = da2.T
    if attrs.get("transpose_b"):
        db2 = db2.T
    return da2.reshape(x.shape), db2.reshape(y.shape)


def _fw_relu(v, a):
    return np.maximum(v[0], 0.0), None


def _bw_relu(g, v, out, saved, a):
    return (g * (v[0] > 0),)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _fw_sigmoid(v, a):
    return _sigmoid(v[0]), None


def _bw_sigmoid(g, v, out, saved, a):
    return (g * out * (1.0 - out),)


def _fw_exp(v, a):
    if np.any(v[0] > 709.0):
        raise DomainError("exp overflow: argument above 709")
    return np.exp(v[0]), None


def _bw_exp(g, v, out, saved, a):
    return (g * out,)


def _fw_log(v, a):
    if np.any(v[0] <= 0):
        raise DomainError("log of non-positive value")
    return np.log(v[0]), None


def _bw_log(g, v, out, saved, a):
    return (g / v[0],)


def _fw_sqrt(v, a):
    if np.any(v[0] < 0):
        raise DomainError("sqrt of negative value")
    return np.sqrt(v[0]), None


def _bw_sqrt(g, v, out, saved, a):
    # derivative is unbounded at 0; the subgradient 0 is used there
    safe = np.where(out > 0, out, 1.0)
    return (np.where(out > 0, g / (2.0 * safe), 0.0),)


def _fw_sum(v, attrs):
    return np.sum(v[0], axis=attrs.get("axis")), None


def _expand_reduced(g, x, axis):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x.shape).copy()


def _bw_sum(g, v, out, saved, attrs):
    return (_expand_reduced(g, v[0], attrs.get("axis")),)


def _fw_mean(v, attrs):
    return np.mean(v[0], axis=attrs.get("axis")), None


def _bw_mean(g, v, out, saved, attrs):
    axis = attrs.get("axis")
    n = v[0].size if axis is None else v[0].shape[axis]
    return (_expand_reduced(g, v[0], axis) / n,)


def _fw_clamp(v, attrs):
    lo, hi = attrs["lo"], attrs["hi"]
    if lo > hi:
        raise ContractError("clamp requires lo <= hi")
    return np.clip(v[0], lo, hi), None


def _bw_clamp(g, v, out, saved, attrs):
    x = v[0]
    return (g * ((x > attrs["lo"]) & (x < attrs["hi"])),)


def _fw_abs(v, a):
    return np.abs(v[0]), None


def _bw_abs(g, v, out, saved, a):
    return (g * np.sign(v[0]),)


def _fw_pow(v, attrs):
    p = float(attrs["p"])
    x = v[0]
    if not float(p).is_integer() and np.any(x < 0):
        raise DomainError("non-integer power of a negative value")
    if p < 0 and np.any(x == 0):
        raise DomainError("negative power of zero")
    return np.power(x, p), None


def _bw_pow(g, v, out, saved, attrs):
    p = float(attrs["p"])
    x = v[0]
    if p == 0:
        return (np.zeros_like(x),)
    if p < 1:
        safe = np.where(x != 0, x, 1.0)
        return (np.where(x != 0, g * p * np.power(safe, p - 1.0), 0.0),)
    return (g * p * np.power(x, p - 1.0),)


def _fw_softmax(v, a):
    x = v[0]
    z = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return z / np.sum(z, axis=-1, keepdims=True), None


def _bw_softmax(g, v, out, saved, a):
    return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)


def _fw_l2n(v, attrs):
    x = v[0]
    eps = attrs.get("eps", NORM_EPS)
    n = np.sqrt(np.sum(x * x, axis=-1, keepdims=True) + eps)
    return x / n, {"n": n}


def _bw_l2n(g, v, out, saved, attrs):
    x = v[0]
    n = saved["n"]
    dot = np.sum(g * x, axis=-1, keepdims=True)
    return (g / n - x * dot / (n * n * n),)


def _fw_cos(v, attrs):
    x, y = v
    if x.shape != y.shape:
        raise DimensionError(f"cosine_similarity shapes {x.shape} and {y.shape} differ")
    eps = attrs.get("eps", NORM_EPS)
    nx = np.sqrt(np.sum(x * x, axis=-1) + eps)
    ny = np.sqrt(np.sum(y * y, axis=-1) + eps)
    dot = np.sum(x * y, axis=-1)
    return dot / (nx * ny), {"nx": nx, "ny": ny}


def _bw_cos(g, v, out, saved, attrs):
    x, y = v
    nx = saved["nx"][..., None]
    ny = saved["ny"][..., None]
    c = out[..., None]
    gg = g[..., None]
    dx = gg * (y / (nx * ny) - c * x / (nx * nx))
    dy = gg * (x / (nx * ny) - c * y / (ny * ny))
    return dx, dy


PRIMITIVES: Dict[str, tuple] = {
    "add": (2, _fw_add, _bw_add),
    "sub": (2, _fw_sub, _bw_sub),
    "mul": (2, _fw_mul, _bw_mul),
    "div": (2, _fw_div, _bw_div),
    "matmul": (2, _fw_matmul, _bw_matmul),
    "relu": (1, _fw_relu, _bw_relu),
    "sigmoid": (1, _fw_sigmoid, _bw_sigmoid),
    "exp": (1, _fw_exp, _bw_exp),
    "log": (1, _fw_log, _bw_log),
    "sqrt": (1, _fw_sqrt, _bw_sqrt),
    "sum": (1, _fw_sum, _bw_sum),
    "mean": (1, _fw_mean, _bw_mean),
    "clamp": (1, _fw_clamp, _bw_clamp),
    "abs": (1, _fw_abs, _bw_abs),
    "pow": (1, _fw_pow, _bw_pow),
    "softmax": (1, _fw_softmax, _bw_softmax),
    "l2_normalize": (1, _fw_l2n, _bw_l2n),
    "cosine_similarity": (2, _fw_cos, _bw_cos),
}


def apply_primitive(op_id: str, inputs: Sequence[Any], attrs: Optional[dict] = None) -> Tensor:
    """Evaluate primitive ``op_id`` and record it for differentiation.

    Plain numbers and arrays in ``inputs`` are promoted to constant tensors.
    """
    try:
        arity, fw, _ = PRIMITIVES[op_id]
    except KeyError:
        raise ContractError(f"unknown primitive {op_id!r}") from None
    if len(inputs) != arity:
        raise ContractError(f"{op_id} expects {arity} inputs, got {len(inputs)}")
    attrs = dict(attrs or {})
    ts = tuple(tensor(x) for x in inputs)
    dtype = np.result_type(*[t.data.dtype for t in ts])
    values = tuple(t.data for t in ts)
    out_data, saved = fw(values, attrs)
    out = Tensor(out_data, dtype=dtype)
    if any(t.requires_grad for t in ts):
        out.requires_grad = True
        out.record = GradRecord(op_id, ts, saved or {}, attrs)
    return out


class GradMap(dict):
    """Gradients keyed by tensor identity; index with the tensor itself."""

    def __getitem__(self, key):
        return dict.__getitem__(self, id(key) if isinstance(key, Tensor) else key)

    def __contains__(self, key):
        return dict.__contains__(self, id(key) if isinstance(key, Tensor) else key)

    def get(self, key, default=None):
        return dict.get(self, id(key) if isinstance(key, Tensor) else key, default)


def _topological(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.record is not None:
            for parent in node.record.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> GradMap:
    """Return dLoss/dT for every tensor in the graph that requires grad."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("backward requires a scalar loss tensor")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data, dtype=np.float64)}
    result = GradMap()
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        result[id(node)] = Tensor(g)
        rec = node.record
        if rec is None:
            continue
        _, _, bw = PRIMITIVES[rec.op]
        values = tuple(t.data for t in rec.inputs)
        parts = bw(g, values, node.data, rec.saved, rec.attrs)
        for parent, pg in zip(rec.inputs, parts):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else np.array(pg, dtype=np.float64)
    return result


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    analytic: np.ndarray = field(repr=False, default=None)
    numeric: np.ndarray = field(repr=False, default=None)



def check_gradients(
    fn: Callable[[Tensor], Tensor], point, step: float = 1e-5, tol: float = 1e-4
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    Relative error per element is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0, requires_grad=True)
    out = fn(x)
    if not np.all(np.isfinite(out.data)):
        raise DomainError("function value is not finite at the check point")
    grads = backward(out)
    analytic = grads[x].data if x in grads else np.zeros_like(x0)
    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = fn(Tensor(hi.reshape(x0.shape))).item()
        f_lo = fn(Tensor(lo.reshape(x0.shape))).item()
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise DomainError(f"function value is not finite near element {i}")
        num_flat[i] = (f_hi - f_lo) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel, max_rel <= tol, analytic, numeric)


# thin functional wrappers -------------------------------------------------


def add(a, b):
    return apply_primitive("add", (a, b))


def sub(a, b):
    return apply_primitive("sub", (a, b))


def mul(a, b):
    return apply_primitive("mul", (a, b))


def div(a, b):
    return apply_primitive("div", (a, b))


def matmul(a, b, transpose_a=False, transpose_b=False):
    return apply_primitive("matmul", (a, b), {"transpose_a": transpose_a, "transpose_b": transpose_b})


def relu(x):
    return apply_primitive("relu", (x,))


def sigmoid(x):
    return apply_primitive("sigmoid", (x,))


def exp(x):
    return apply_primitive("exp", (x,))


def log(x):
    return apply_primitive("log", (x,))


def sqrt(x):
    return apply_primitive("sqrt", (x,))


def tsum(x, axis=None):
    return apply_primitive("sum", (x,), {"axis": axis})


def mean(x, axis=None):
    return apply_primitive("mean", (x,), {"axis": axis})


def clamp(x, lo, hi):
    return apply_primitive("clamp", (x,), {"lo": lo, "hi": hi})


def tabs(x):
    return apply_primitive("abs", (x,))


def tpow(x, p):
    return apply_primitive("pow", (x,), {"p": p})


def softmax(x):
    return apply_primitive("softmax", (x,))


def l2_normalize(x, eps=NORM_EPS):
    return apply_primitive("l2_normalize", (x,), {"eps": eps})


def cosine_similarity(a, b, eps=NORM_EPS):
    return apply_primitive("cosine_similarity", (a, b), {"eps": eps})


def rows_to_matrix(col, n_cols):
    """Spread a (C, 1) column across C x n_cols, one value per row."""
    return matmul(col, np.ones((1, n_cols)))


def tile_rows(row, n_rows):
    """Stack a (1, C) row n_rows times (bias terms)."""
    return matmul(np.ones((n_rows, 1)), row)
