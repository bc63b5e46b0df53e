"""
Dense tensors with reverse-mode differentiation

Every op builds a node holding its parents and a backward closure that maps
the output gradient to one gradient per parent. Shapes must match exactly;
the only broadcast allowed is a single-element operand (scalar).
"""

import contextlib
import contextvars
import math
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import NumericalError, ShapeError, UsageError

MAX_AXES = 4
GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715

_grad_enabled = contextvars.ContextVar("s2w_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Ops evaluated inside do not record the graph"""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.ndim > MAX_AXES:
            raise ShapeError(f"at most {MAX_AXES} axes supported, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into .grad of every leaf that requires it"""
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs an explicit grad for shape {self.shape}")
            grad = np.ones_like(self.data)

        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(_topological_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar, numbers go through the scalar ops
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """Learnable leaf tensor with a unique dotted name, e.g. "spebs1.fm_ll.alpha" """

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=None):
        super().__init__(np.array(data, dtype=dtype, copy=True), requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a forward result as a graph node.

    Args:
        data: forward result
        parents: input tensors, in the order backward returns their gradients
        backward: g -> tuple of gradients (None for inputs without one)
    """
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced (shape {np.shape(data)})")
    requires = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


# ==================== Elementwise ====================


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "add")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return make_op(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return make_op(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product"""
    _check_pair(a, b, "mul")

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return make_op(a.data * b.data, (a, b), backward)


def scale(a: Tensor, k: float) -> Tensor:
    return make_op(a.data * k, (a,), lambda g: (g * k,))


def add_scalar(a: Tensor, k: float) -> Tensor:
    return make_op(a.data + k, (a,), lambda g: (g,))


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return make_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return make_op(t, (a,), lambda g: (g * (1.0 - t * t),))


def gelu(a: Tensor) -> Tensor:
    """tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))"""
    x = a.data
    t = np.tanh(GELU_C * (x + GELU_K * x**3))

    def backward(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return make_op(0.5 * x * (1.0 + t), (a,), backward)


def softplus(a: Tensor) -> Tensor:
    return make_op(np.logaddexp(0.0, a.data), (a,), lambda g: (g * expit(a.data),))


def silu(a: Tensor) -> Tensor:
    s = expit(a.data)
    x = a.data
    return make_op(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "gelu": gelu, "softplus": softplus, "silu": silu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(tag: str, a: Tensor, b: Optional[Tensor] = None, k: Optional[float] = None) -> Tensor:
    """Dispatch by tag: add, sub, mul, sigmoid, tanh, gelu, softplus, silu, scale"""
    if tag in _BINARY:
        if b is None:
            raise UsageError(f"{tag} needs two operands")
        return _BINARY[tag](a, b)
    if tag in _UNARY:
        return _UNARY[tag](a)
    if tag == "scale":
        if k is None:
            raise UsageError("scale needs a factor k")
        return scale(a, k)
    raise UsageError(f"unknown elementwise op {tag!r}")


# ==================== Reductions / losses ====================


def sum_all(a: Tensor) -> Tensor:
    return make_op(np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, g, dtype=a.dtype),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return make_op(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def mean_abs_error(pred: Tensor, target: Tensor) -> Tensor:
    """mean |pred - target|; the subgradient at 0 is 0"""
    if pred.shape != target.shape:
        raise ShapeError(f"mean_abs_error: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        d = np.sign(diff) * (g / n)
        return d, -d

    return make_op(np.asarray(np.abs(diff).mean()), (pred, target), backward)


# ==================== Layout ====================


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(d1 != d2 for i, (d1, d2) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def slice_axis(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    if not 0 <= start < stop <= a.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return make_op(a.data[index].copy(), (a,), backward)


def split(a: Tensor, parts: int, axis: int = 0) -> List[Tensor]:
    n = a.shape[axis]
    if n % parts:
        raise ShapeError(f"cannot split axis of {n} into {parts} parts")
    step = n // parts
    return [slice_axis(a, i * step, (i + 1) * step, axis) for i in range(parts)]


def scale_axis(a: Tensor, v: Tensor, axis: int = 0) -> Tensor:
    """Multiply by a vector laid along one axis (per-channel scaling)"""
    axis = axis % a.ndim
    if v.ndim != 1 or v.shape[0] != a.shape[axis]:
        raise ShapeError(f"scale_axis: vector {v.shape} does not match axis {axis} of {a.shape}")
    view = [1] * a.ndim
    view[axis] = -1
    vr = v.data.reshape(view)
    others = tuple(i for i in range(a.ndim) if i != axis)

    def backward(g):
        return g * vr, (g * a.data).sum(axis=others)

    return make_op(a.data * vr, (a, v), backward)


def spatial_mean(a: Tensor) -> Tensor:
    """C x H x W -> C (global average pooling)"""
    if a.ndim != 3:
        raise ShapeError(f"spatial_mean expects C x H x W, got {a.shape}")
    hw = a.shape[1] * a.shape[2]

    def backward(g):
        return (np.broadcast_to(g[:, None, None] / hw, a.shape).copy(),)

    return make_op(a.data.mean(axis=(1, 2)), (a,), backward)


def expand_spatial(v: Tensor, height: int, width: int) -> Tensor:
    """C -> C x H x W, constant per channel"""
    if v.ndim != 1:
        raise ShapeError(f"expand_spatial expects a vector, got {v.shape}")
    out = np.broadcast_to(v.data[:, None, None], (v.shape[0], height, width)).copy()
    return make_op(out, (v,), lambda g: (g.sum(axis=(1, 2)),))


def avg_pool2d(a: Tensor, r: int) -> Tensor:
    c, h, w = a.shape
    if h % r or w % r:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {r}")
    out = a.data.reshape(c, h // r, r, w // r, r).mean(axis=(2, 4))

    def backward(g):
        return (np.repeat(np.repeat(g, r, axis=1), r, axis=2) / (r * r),)

    return make_op(out, (a,), backward)


# ==================== Linear maps ====================


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x (N, d_in) @ weight (d_out, d_in).T + bias (d_out)"""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: x {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, backward)


def conv2d(
    x: Tensor,
    kernels: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
    groups: int = 1,
) -> Tensor:
    """2D cross-correlation of a C x H x W map.

    Args:
        x: input, C_in x H x W
        kernels: C_out x (C_in / groups) x k x k
        bias: optional C_out vector
        stride: step between output samples
        pad: zero padding on every side
        groups: 1 (dense) or C_in (depthwise, C_out == C_in)
    """
    if x.ndim != 3 or kernels.ndim != 4:
        raise ShapeError(f"conv2d: expected C x H x W input and 4-D kernels, got {x.shape}, {kernels.shape}")
    c_in, h, w = x.shape
    c_out, k_in, kh, kw = kernels.shape
    if k_in * groups != c_in:
        raise ShapeError(f"conv2d: channel mismatch, input {c_in}, kernels {kernels.shape}, groups {groups}")
    if groups not in (1, c_in) or (groups == c_in and groups > 1 and c_out != c_in):
        raise ShapeError(f"conv2d: only dense or depthwise convolution supported (groups={groups})")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"conv2d: input {h}x{w} smaller than kernel {kh}x{kw}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {c_out} outputs")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    depthwise = groups > 1

    if depthwise:
        out = np.zeros((c_out, ho, wo), dtype=np.result_type(x.data, kernels.data))
        for i in range(kh):
            for j in range(kw):
                out += kernels.data[:, 0, i, j, None, None] * xp[:, i:i + span_h:stride, j:j + span_w:stride]
        cols = None
    else:
        cols = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        out = np.tensordot(kernels.data, cols, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out = out + bias.data[:, None, None]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        if depthwise:
            gk = np.zeros(kernels.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    window = xp[:, i:i + span_h:stride, j:j + span_w:stride]
                    gk[:, 0, i, j] = (g * window).sum(axis=(1, 2))
                    gxp[:, i:i + span_h:stride, j:j + span_w:stride] += kernels.data[:, 0, i, j, None, None] * g
        else:
            gk = np.tensordot(g, cols, axes=([1, 2], [1, 2]))
            gcols = np.tensordot(kernels.data, g, axes=([0], [0]))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + span_h:stride, j:j + span_w:stride] += gcols[:, i, j]
        gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return make_op(out, parents, backward)


def causal_conv1d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None, row_width: Optional[int] = None) -> Tensor:
    """Depthwise causal convolution along the token axis of an N x D sequence.

    y[t] = bias + sum_s kernels[:, K-1-s] * x[t-s]. With row_width set, taps
    that would reach back into the previous raster row are dropped.
    """
    if x.ndim != 2 or kernels.ndim != 2 or kernels.shape[0] != x.shape[1]:
        raise ShapeError(f"causal_conv1d: x {x.shape} incompatible with kernels {kernels.shape}")
    n, _ = x.shape
    width = kernels.shape[1]
    position = np.arange(n) % row_width if row_width else np.arange(n)
    masks = [(position >= s)[:, None] for s in range(width)]

    def shifted(arr, s):
        if s == 0:
            return arr
        out = np.zeros_like(arr)
        out[s:] = arr[:n - s]
        return out

    taps = [shifted(x.data, s) * masks[s] for s in range(width)]
    out = sum(taps[s] * kernels.data[:, width - 1 - s] for s in range(width))
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = np.zeros_like(x.data)
        gk = np.zeros(kernels.shape, dtype=g.dtype)
        for s in range(width):
            gm = g * masks[s]
            gk[:, width - 1 - s] = (gm * taps[s]).sum(axis=0)
            gx[:n - s] += gm[s:] * kernels.data[:, width - 1 - s]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return make_op(out, parents, backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-token normalization of an N x d sequence, then affine"""
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"layernorm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def backward(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return make_op(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


# ==================== Parameters ====================


class ParamGroup:
    """Container whose Parameter / ParamGroup attributes form a named tree"""

    def parameters(self) -> List[Parameter]:
        return list(self.named_parameters())

    def named_parameters(self) -> Iterator[Parameter]:
        for value in vars(self).values():
            yield from _walk(value)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _walk(value) -> Iterator[Parameter]:
    if isinstance(value, Parameter):
        yield value
    elif isinstance(value, ParamGroup):
        yield from value.named_parameters()
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _walk(item)
    elif isinstance(value, dict):
        for item in value.values():
            yield from _walk(item)


def init_uniform(rng: np.random.Generator, shape, fan_in: int, name: str, dtype=np.float64) -> Parameter:
    """Fan-in scaled uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in))"""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return Parameter(rng.uniform(-bound, bound, size=shape), name=name, dtype=dtype)


def init_const(shape, value: float, name: str, dtype=np.float64) -> Parameter:
    return Parameter(np.full(shape, value), name=name, dtype=dtype)


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


# ==================== Gradient check ====================


def check_gradients(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: Optional[int] = None,
    seed: int = 0,
    atol: float = 1e-7,
):
    """Compare analytic gradients against central finite differences.

    f rebuilds the scalar loss from the current parameter values. The error of
    a parameter is max|analytic - numeric| / max(max|analytic|, max|numeric|, atol).
    With max_entries set, that many entries per parameter are sampled; the
    analytic scale still comes from the whole gradient of the parameter.
    """
    from .models import GradCheckEntry, GradCheckReport

    zero_grad(params)
    loss = f()
    if loss.size != 1:
        raise UsageError(f"check_gradients needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericalError("non-finite loss in gradient check")
    loss.backward()

    rng = np.random.default_rng(seed)
    entries = []
    for p in params:
        analytic_full = p.grad if p.grad is not None else np.zeros_like(p.data)
        if max_entries is not None and p.size > max_entries:
            indices = rng.choice(p.size, size=max_entries, replace=False)
        else:
            indices = np.arange(p.size)
        flat = p.data.reshape(-1)
        numeric = np.empty(len(indices))
        for n, idx in enumerate(indices):
            orig = flat[idx]
            with no_grad():
                flat[idx] = orig + h
                plus = float(f().data)
                flat[idx] = orig - h
                minus = float(f().data)
            flat[idx] = orig
            numeric[n] = (plus - minus) / (2.0 * h)
        analytic = analytic_full.reshape(-1)[indices]
        denom = max(np.abs(analytic_full).max(initial=0.0), np.abs(numeric).max(initial=0.0), atol)
        error = float(np.abs(analytic - numeric).max(initial=0.0) / denom)
        entries.append(GradCheckEntry(name=p.name, checked=len(indices), max_rel_error=error, passed=error < tol))
    zero_grad(params)
    return GradCheckReport(entries=entries, tolerance=tol, passed=all(e.passed for e in entries))
