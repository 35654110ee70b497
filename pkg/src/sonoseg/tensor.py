"""Reverse-mode differentiable tensors on top of numpy.

Float32 is the working precision everywhere in the pipeline; float64 is
supported so that test oracles (finite differences) can run without
rounding noise.  The computation graph is rebuilt on every forward pass
and freed with it; there is no persistent tape.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "ShapeError",
    "Tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "power",
    "absolute",
    "exp",
    "log",
    "sigmoid",
    "softplus",
    "gelu",
    "relu",
    "elementwise",
    "matmul",
    "softmax",
    "layer_norm",
    "patch_embed",
    "upsample_2x",
    "reshape",
    "transpose",
    "concat",
    "tsum",
    "tmean",
    "backward",
    "no_grad",
    "grad_check",
    "GradCheckReport",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class _Node:
    """Links an output to its input tensors and the op's vector-Jacobian product."""

    __slots__ = ("inputs", "vjp")

    def __init__(self, inputs, vjp):
        self.inputs = inputs
        self.vjp = vjp  # grad_out -> tuple of per-input grads (None = no flow)


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference / oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A shape-tagged float array participating in a reverse-mode graph.

    A tensor without a producing node is a leaf (parameter or input).
    ``grad`` is populated by :func:`backward` and accumulates additively
    across graph paths.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all graph building happens in the module functions
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, inputs, vjp) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = _Node(tuple(inputs), vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# pointwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def power(a: Tensor, exponent: float) -> Tensor:
    """a ** exponent for a constant exponent."""
    e = float(exponent)
    out = a.data**e
    return _make(out, (a,), lambda g: (g * e * a.data ** (e - 1.0),))


def absolute(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    # stable in both tails
    out = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))), np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    out = out.astype(a.dtype)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    x = a.data
    out = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)
    sig = 1.0 / (1.0 + np.exp(-np.abs(x)))
    sig = np.where(x >= 0, sig, 1.0 - sig)
    return _make(out.astype(a.dtype), (a,), lambda g: (g * sig,))


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x / _SQRT2))
    out = (x * cdf).astype(a.dtype)

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(out, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid, "gelu": gelu, "relu": relu, "scale": scale}


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch a pointwise op by name; see `_ELEMENTWISE` for the accepted set."""
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}")
    return _ELEMENTWISE[op](*operands)


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-d tensors, or batched product of two 3-d tensors."""
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise ShapeError(f"matmul: expected two 2-d or two 3-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ: {a.shape} x {b.shape}")
    if a.data.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch extents differ: {a.shape} x {b.shape}")

    def vjp(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} out of bounds for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return ((g - np.sum(g * out, axis=axis, keepdims=True)) * out,)

    return _make(out, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply affine."""
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be > 0, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},), got {gain.shape} / {bias.shape}")
    mean = np.mean(x.data, axis=-1, keepdims=True)
    centered = x.data - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def vjp(g):
        gy = g * gain.data
        gx = inv_std / d * (d * gy - np.sum(gy, axis=-1, keepdims=True) - xhat * np.sum(gy * xhat, axis=-1, keepdims=True))
        axes = tuple(range(x.data.ndim - 1))
        return (gx.astype(x.dtype), np.sum(g * xhat, axis=axes), np.sum(g, axis=axes))

    return _make(out.astype(x.dtype), (x, gain, bias), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def _getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def vjp(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _make(np.ascontiguousarray(out), (x,), vjp)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(out, (x,), vjp)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        n = x.shape[axis] if isinstance(axis, int) else int(np.prod([x.shape[a] for a in axis]))
    out = np.mean(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, x.shape) / n).astype(x.dtype),)

    return _make(out, (x,), vjp)


# ---------------------------------------------------------------------------
# convolution-equivalent projections (the only spatial kernels the model needs)


def patch_embed(image: Tensor, patch: int, weight: Tensor, bias: Tensor) -> Tensor:
    """Project non-overlapping patch×patch blocks of a [c,h,w] image to tokens.

    Equivalent to a stride-`patch` convolution with kernel size `patch`.
    Returns [h/patch * w/patch, d] tokens in row-major grid order.
    """
    c, h, w = image.shape
    if h % patch or w % patch:
        raise ShapeError(f"patch_embed: image extents {h}x{w} not divisible by patch {patch}")
    d = weight.shape[0]
    if weight.shape != (d, c * patch * patch):
        raise ShapeError(f"patch_embed: weight shape {weight.shape} != ({d}, {c * patch * patch})")
    gh, gw = h // patch, w // patch
    x = reshape(image, (c, gh, patch, gw, patch))
    x = transpose(x, (1, 3, 0, 2, 4))
    x = reshape(x, (gh * gw, c * patch * patch))
    return add(matmul(x, transpose(weight)), bias)


def upsample_2x(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Learnable 2x spatial upscaling of a [c,h,w] grid.

    `weight` has shape [c, c_out, 2, 2]; the op is the transposed convolution
    with kernel 2 and stride 2, so each input pixel expands into a 2x2 block.
    """
    c, h, w = x.shape
    c_in, c_out = weight.shape[0], weight.shape[1]
    if c_in != c or weight.shape[2:] != (2, 2):
        raise ShapeError(f"upsample_2x: weight shape {weight.shape} incompatible with input {x.shape}")
    t = reshape(transpose(x, (1, 2, 0)), (h * w, c))
    y = matmul(t, reshape(weight, (c, c_out * 4)))
    y = reshape(y, (h, w, c_out, 2, 2))
    y = transpose(y, (2, 0, 3, 1, 4))
    y = reshape(y, (c_out, 2 * h, 2 * w))
    return add(y, reshape(bias, (c_out, 1, 1)))


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")

    # iterative topological sort (graphs are deep enough to overflow recursion)
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            topo.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.inputs:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for t in reversed(topo):
        if t.node is None or t.grad is None:
            continue
        partials = t.node.vjp(t.grad)
        for inp, pg in zip(t.node.inputs, partials):
            if pg is None or not inp.requires_grad:
                continue
            pg = np.asarray(pg, dtype=inp.dtype).reshape(inp.shape)
            # accumulation always allocates, so sharing buffers with t.grad is safe
            inp.grad = pg if inp.grad is None else inp.grad + pg


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckEntry:
    input_index: int
    max_rel_err: float
    worst_coord: tuple[int, ...]
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    tol: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def grad_check(fn, inputs, h: float = 1e-3, tol: float = 1e-3, max_coords: int | None = None, rng=None) -> GradCheckReport:
    """Compare analytic gradients of `fn(*inputs)` against central differences.

    `fn` must be a pure graph builder returning a scalar tensor.  When
    `max_coords` is set, at most that many coordinates per input are probed
    (uniformly sampled with `rng`).

    The per-coordinate error is relative to the coordinate's own magnitude,
    floored at a tenth of the gradient's infinity norm: coordinates much
    smaller than the gradient's scale sit below the float32 finite-difference
    noise floor and would otherwise fail vacuously.
    """
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError("grad_check: fn must produce a scalar")
    backward(out)

    report = GradCheckReport(tol=tol)
    for i, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        scale = float(np.max(np.abs(analytic))) if analytic.size else 0.0
        worst = GradCheckEntry(i, 0.0, (), 0.0, 0.0)
        for k in coords:
            orig = flat[k]
            with no_grad():
                flat[k] = orig + h
                f_plus = fn(*inputs).item()
                flat[k] = orig - h
                f_minus = fn(*inputs).item()
            flat[k] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic.reshape(-1)[k])
            scale = max(scale, abs(numeric))
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 0.1 * scale, 1e-8)
            if rel > worst.max_rel_err:
                worst = GradCheckEntry(i, rel, np.unravel_index(k, t.shape), a, numeric)
        report.entries.append(worst)
    return report
