"""Dense tensor core with reverse-mode differentiation.

Buffers are contiguous numpy arrays in row-major order; image tensors are
channel-first (B, C, H, W). Every operator records a backward rule, so any
composition of them can be differentiated with `backward`.
"""
from __future__ import annotations

import contextlib
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_expit

logger = logging.getLogger(__name__)

DEBUG_NUMERICS = os.environ.get("FERYOLO_DEBUG_NUMERICS", "") == "1"
LN_EPS = 1e-5
MAGIC = b"FERYTNS1"  # 8 bytes


class ShapeError(ValueError):
    """Operator inputs disagree on an axis."""


class NonFiniteError(FloatingPointError):
    """An operator produced NaN or Inf while debug checks are on."""


# =========================
# Precision / grad mode
# =========================
_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def get_default_dtype():
    return _DEFAULT_DTYPE


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created with (float32/float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    previous, _DEFAULT_DTYPE = _DEFAULT_DTYPE, dtype
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block (inference, finite differences)."""
    global _GRAD_ENABLED
    previous, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


# =========================
# Tensor
# =========================
Backprop = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
Scalar = Union[int, float]


class Tensor:
    """An immutable buffer plus the recorded operator that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_prev", "_backprop", "_op")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else _DEFAULT_DTYPE
        self.data: np.ndarray = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._prev: Tuple["Tensor", ...] = ()
        self._backprop: Optional[Backprop] = None
        self._op = ""

    # ---- metadata ----
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def strides(self) -> Tuple[int, ...]:
        """Row-major element strides derived from the shape."""
        out, acc = [], 1
        for extent in reversed(self.shape):
            out.append(acc)
            acc *= extent
        return tuple(reversed(out))

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # ---- operators ----
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

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into `.grad` of every reachable leaf."""
        graph = Graph.trace(self)
        for leaf, grad in zip(graph.leaves, backward(graph, self)):
            leaf.grad = grad if leaf.grad is None else leaf.grad + grad


def parameter(data, name: Optional[str] = None) -> Tensor:
    """Trainable leaf in the current default dtype."""
    return Tensor(np.asarray(data), requires_grad=True, name=name, dtype=_DEFAULT_DTYPE)


def _as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(value, dtype=dtype))


def make_op(data: np.ndarray, parents: Sequence[Tensor], backprop: Backprop, op: str) -> Tensor:
    if DEBUG_NUMERICS and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backprop = backprop
    return out


# =========================
# Graph + backward
# =========================
@dataclass
class Graph:
    nodes: List[Tensor]   # topological order, inputs before consumers
    leaves: List[Tensor]  # parameters flagged requires_grad

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))
        leaves = [n for n in order if n.requires_grad and not n._prev]
        return cls(nodes=order, leaves=leaves)


def backward(graph: Graph, loss: Tensor, leaves: Optional[Sequence[Tensor]] = None) -> List[np.ndarray]:
    """Gradient of a scalar `loss` w.r.t. each leaf; unreachable leaves get zeros."""
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    leaves = graph.leaves if leaves is None else list(leaves)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        if not node._prev:
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._prev, node._backprop(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return [grads.get(id(leaf), np.zeros_like(leaf.data)) for leaf in leaves]


# ------------------------ broadcasting ------------------------
def _is_scalar_shape(shape: Tuple[int, ...]) -> bool:
    return len(shape) <= 1 and int(np.prod(shape, dtype=np.int64)) == 1


def _broadcast_shape(sa: Tuple[int, ...], sb: Tuple[int, ...], op: str) -> Tuple[int, ...]:
    """Scalar-with-tensor and (B,C,1,1)-with-(B,C,H,W) only."""
    if sa == sb:
        return sa
    if _is_scalar_shape(sb):
        return sa
    if _is_scalar_shape(sa):
        return sb
    if len(sa) == len(sb) == 4 and sa[:2] == sb[:2]:
        if sb[2:] == (1, 1):
            return sa
        if sa[2:] == (1, 1):
            return sb
    if len(sa) != len(sb):
        raise ShapeError(f"{op}: rank mismatch {sa} vs {sb}")
    axis = next(i for i, (x, y) in enumerate(zip(sa, sb)) if x != y)
    raise ShapeError(f"{op}: axis {axis} has extent {sa[axis]} vs {sb[axis]} ({sa} vs {sb})")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if _is_scalar_shape(shape):
        return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)
    return grad.sum(axis=(2, 3), keepdims=True)


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    return _as_tensor(a, like), _as_tensor(b, like)


# =========================
# Elementwise
# =========================
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "add")
    return make_op(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "sub")
    return make_op(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "mul")
    return make_op(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "div")
    out = a.data / b.data

    def backprop(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return make_op(out, (a, b), backprop, "div")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        _broadcast_shape(a.shape, b.shape, "minimum")
    pick_a = a.data <= b.data
    return make_op(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)), "minimum")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        _broadcast_shape(a.shape, b.shape, "maximum")
    pick_a = a.data >= b.data
    return make_op(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)), "maximum")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_op(out, (x,), lambda g: (g * out,), "exp")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return make_op(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)
    return make_op(x.data * s, (x,), lambda g: (g * s * (1 + x.data * (1 - s)),), "silu")


def softplus(x: Tensor) -> Tensor:
    return make_op(-log_expit(-x.data), (x,), lambda g: (g * expit(x.data),), "softplus")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return make_op(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy; targets carry no gradient."""
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        _broadcast_shape(logits.shape, t.shape, "bce_with_logits")
    loss = -(t * log_expit(logits.data) + (1 - t) * log_expit(-logits.data))
    return make_op(loss, (logits,), lambda g: (g * (expit(logits.data) - t),), "bce_with_logits")


# =========================
# Reductions / data movement
# =========================
def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = x.data.sum(axis=axis)

    def backprop(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)
    return make_op(np.asarray(out), (x,), backprop, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return make_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return make_op(np.ascontiguousarray(np.transpose(x.data, axes)), (x,),
                 lambda g: (np.ascontiguousarray(np.transpose(g, inverse)),), "permute")


def take(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along one axis; the backward pass scatter-adds."""
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    out = np.take(x.data, indices, axis=axis)

    def backprop(g):
        gx = np.zeros_like(x.data)
        np.add.at(np.moveaxis(gx, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (gx,)
    return make_op(out, (x,), backprop, "take")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    axis = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref):
            raise ShapeError(f"concat: rank mismatch {ref} vs {t.shape}")
        for ax, (u, v) in enumerate(zip(ref, t.shape)):
            if ax != axis and u != v:
                raise ShapeError(f"concat: axis {ax} has extent {u} vs {v}")
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_op(out, tensors, lambda g: [np.ascontiguousarray(p) for p in np.split(g, cuts, axis=axis)], "concat")


def split_channels(x: Tensor, sections: Union[int, Sequence[int]], axis: int = 1) -> List[Tensor]:
    extent = x.shape[axis]
    if isinstance(sections, int):
        if sections < 1 or extent % sections:
            raise ShapeError(f"split_channels: axis {axis} extent {extent} not divisible by {sections}")
        sizes = [extent // sections] * sections
    else:
        sizes = list(sections)
        if np.sum(sizes) != extent:
            raise ShapeError(f"split_channels: sizes {sizes} do not cover axis {axis} extent {extent}")
    pieces, start = [], 0
    for size in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + size)
        sl = tuple(sl)

        def backprop(g, sl=sl):
            gx = np.zeros_like(x.data)
            gx[sl] = g
            return (gx,)
        pieces.append(make_op(np.ascontiguousarray(x.data[sl]), (x,), backprop, "split_channels"))
        start += size
    return pieces


# =========================
# Layers as operators
# =========================
def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, axis: int = -1) -> Tensor:
    """y = W x + b applied along `axis` (axis=1 on NCHW is a pointwise layer)."""
    out_f, in_f = weight.shape
    axis = axis % x.ndim
    if x.shape[axis] != in_f:
        raise ShapeError(f"linear: axis {axis} has extent {x.shape[axis]}, weight expects {in_f}")
    xm = np.moveaxis(x.data, axis, -1)
    y = xm @ weight.data.T
    if bias is not None:
        y = y + bias.data
    out = np.ascontiguousarray(np.moveaxis(y, -1, axis))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backprop(g):
        gm = np.moveaxis(g, axis, -1)
        gx = np.ascontiguousarray(np.moveaxis(gm @ weight.data, -1, axis))
        g2 = gm.reshape(-1, out_f)
        gw = g2.T @ xm.reshape(-1, in_f)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    return make_op(out, parents, backprop, "linear")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation on (B, C, H, W) with an (O, C/groups, kh, kw) kernel."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: expected (B, C, H, W) input, got rank {x.ndim}")
    B, C, H, W = x.shape
    O, Cg, kh, kw = kernel.shape
    if C % groups or O % groups:
        raise ShapeError(f"conv2d: channel axis 1 ({C}) and output axis 0 ({O}) must divide groups={groups}")
    if Cg != C // groups:
        raise ShapeError(f"conv2d: kernel axis 1 has extent {Cg}, input gives {C // groups} per group")
    Ho, Wo = conv_output_size(H, kh, stride, padding), conv_output_size(W, kw, stride, padding)
    if Ho < 1:
        raise ShapeError(f"conv2d: axis 2 (H={H}) too small for kernel {kh} with padding {padding}")
    if Wo < 1:
        raise ShapeError(f"conv2d: axis 3 (W={W}) too small for kernel {kw} with padding {padding}")
    G, Og = groups, O // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    wg = win.reshape(B, G, Cg, Ho, Wo, kh, kw)
    kg = kernel.data.reshape(G, Og, Cg, kh, kw)
    out = np.einsum("bgchwij,gocij->bgohw", wg, kg, optimize=True).reshape(B, O, Ho, Wo)
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1, 1)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backprop(g):
        gg = g.reshape(B, G, Og, Ho, Wo)
        gk = np.einsum("bgohw,bgchwij->gocij", gg, wg, optimize=True).reshape(kernel.shape)
        gwin = np.einsum("bgohw,gocij->bgchwij", gg, kg, optimize=True).reshape(B, C, Ho, Wo, kh, kw)
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += gwin[..., i, j]
        gx = gxp[:, :, padding:padding + H, padding:padding + W]
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))
    return make_op(np.ascontiguousarray(out), parents, backprop, "conv2d")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = 1, eps: float = LN_EPS) -> Tensor:
    """Normalize over `axis` at every other position: (x - mu) / sqrt(var + eps) * gamma + beta."""
    axis = axis % x.ndim
    C = x.shape[axis]
    if C == 0:
        raise ShapeError(f"layer_norm: axis {axis} has zero length")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layer_norm: scale/shift must have shape ({C},), got {gamma.shape} / {beta.shape}")
    view = [1] * x.ndim
    view[axis] = C
    g_b, b_b = gamma.data.reshape(view), beta.data.reshape(view)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv
    others = tuple(a for a in range(x.ndim) if a != axis)

    def backprop(g):
        gxhat = g * g_b
        gx = inv * (gxhat - gxhat.mean(axis=axis, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axis, keepdims=True))
        return gx, (g * xhat).sum(axis=others), g.sum(axis=others)
    return make_op(xhat * g_b + b_b, (x, gamma, beta), backprop, "layer_norm")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected (B, C, H, W), got rank {x.ndim}")
    B, C, H, W = x.shape
    return make_op(x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).copy(),), "global_avg_pool")


def max_pool(x: Tensor, kernel: int, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    stride = stride or kernel
    B, C, H, W = x.shape
    Ho, Wo = conv_output_size(H, kernel, stride, padding), conv_output_size(W, kernel, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"max_pool: spatial axes ({H}, {W}) too small for kernel {kernel}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else x.data
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backprop(g):
        gwin = np.zeros((B, C, Ho, Wo, kernel * kernel), dtype=x.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gwin = gwin.reshape(B, C, Ho, Wo, kernel, kernel)
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kernel):
            for j in range(kernel):
                gxp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += gwin[..., i, j]
        return (gxp[:, :, padding:padding + H, padding:padding + W],)
    return make_op(np.ascontiguousarray(out), (x,), backprop, "max_pool")


def nearest_upsample(x: Tensor, scale: int = 2) -> Tensor:
    B, C, H, W = x.shape
    out = x.data.repeat(scale, axis=2).repeat(scale, axis=3)
    return make_op(out, (x,), lambda g: (g.reshape(B, C, H, scale, W, scale).sum(axis=(3, 5)),), "nearest_upsample")


# =========================
# Gradient checking
# =========================
CaseBuilder = Callable[[np.random.Generator, Optional[tuple]], Tuple[Callable[..., Tensor], Dict[str, np.ndarray]]]


@dataclass
class GradCheckCase:
    name: str
    build: CaseBuilder
    exact: bool = False  # pure data movement: unit inputs give the Jacobian exactly


@dataclass
class GradCheckReport:
    op: str
    seed: int
    per_param: Dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


GRADCHECK_CASES: Dict[str, GradCheckCase] = {}


def register_gradcheck(name: str, exact: bool = False):
    def deco(builder: CaseBuilder) -> CaseBuilder:
        GRADCHECK_CASES[name] = GradCheckCase(name, builder, exact)
        return builder
    return deco


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(numeric).max(initial=0.0)), float(np.abs(analytic).max(initial=0.0)), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def grad_check(op_name: str, shape_spec: Optional[tuple] = None, seed: int = 0, h: float = 1e-4) -> GradCheckReport:
    """Analytic gradients vs central differences (64-bit) for one registered operator."""
    case = GRADCHECK_CASES.get(op_name)
    if case is None:
        raise ValueError(f"unknown operator {op_name!r}; known: {', '.join(sorted(GRADCHECK_CASES))}")
    rng = np.random.default_rng(seed)
    report = GradCheckReport(op=op_name, seed=seed)
    with default_dtype(np.float64):
        fn, inputs = case.build(rng, shape_spec)
        names = list(inputs)
        arrays = [np.asarray(inputs[n], dtype=np.float64) for n in names]
        leaves = [Tensor(a, requires_grad=True, name=n) for a, n in zip(arrays, names)]
        out = fn(*leaves)
        weights = rng.standard_normal(out.shape)
        loss = sum(mul(out, Tensor(weights)))
        analytic = backward(Graph.trace(loss), loss, leaves)

        def objective(values: List[np.ndarray]) -> float:
            with no_grad():
                return float((fn(*[Tensor(v) for v in values]).data * weights).sum())

        for k, name in enumerate(names):
            numeric = np.zeros_like(arrays[k])
            flat = numeric.reshape(-1)
            for i in range(arrays[k].size):
                if case.exact:
                    basis = [np.zeros_like(a) for a in arrays]
                    basis[k].reshape(-1)[i] = 1.0
                    flat[i] = objective(basis)
                    continue
                plus = [a.copy() for a in arrays]
                minus = [a.copy() for a in arrays]
                plus[k].reshape(-1)[i] += h
                minus[k].reshape(-1)[i] -= h
                flat[i] = (objective(plus) - objective(minus)) / (2 * h)
            report.per_param[name] = _rel_err(analytic[k], numeric)
            logger.debug("grad_check %s/%s: %.3e", op_name, name, report.per_param[name])
    return report


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(0.2, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


@register_gradcheck("conv2d")
def _case_conv2d(rng, spec):
    B, C, H, W = spec or (2, 3, 5, 5)
    return (lambda x, k, b: conv2d(x, k, b, stride=2, padding=1),
            {"x": rng.standard_normal((B, C, H, W)), "kernel": rng.standard_normal((4, C, 3, 3)),
             "bias": rng.standard_normal(4)})


@register_gradcheck("conv2d_depthwise")
def _case_depthwise(rng, spec):
    B, C, H, W = spec or (2, 4, 5, 5)
    return (lambda x, k: conv2d(x, k, stride=1, padding=1, groups=C),
            {"x": rng.standard_normal((B, C, H, W)), "kernel": rng.standard_normal((C, 1, 3, 3))})


@register_gradcheck("linear")
def _case_linear(rng, spec):
    out_f, in_f = spec or (4, 3)
    return (lambda x, w, b: linear(x, w, b),
            {"x": rng.standard_normal((2, in_f)), "weight": rng.standard_normal((out_f, in_f)),
             "bias": rng.standard_normal(out_f)})


@register_gradcheck("layer_norm")
def _case_layer_norm(rng, spec):
    shape = tuple(spec or (2, 4, 3, 3))
    axis = 0 if len(shape) == 1 else 1
    C = shape[axis]
    return (lambda x, g, b: layer_norm(x, g, b, axis=axis),
            {"x": rng.standard_normal(shape), "gamma": rng.uniform(0.5, 1.5, C), "beta": rng.standard_normal(C)})


@register_gradcheck("silu")
def _case_silu(rng, spec):
    return silu, {"x": rng.standard_normal(spec or (3, 4))}


@register_gradcheck("relu")
def _case_relu(rng, spec):
    return relu, {"x": _away_from_zero(rng, spec or (3, 4))}


@register_gradcheck("sigmoid")
def _case_sigmoid(rng, spec):
    return sigmoid, {"x": rng.standard_normal(spec or (3, 4))}


@register_gradcheck("softplus")
def _case_softplus(rng, spec):
    return softplus, {"x": rng.standard_normal(spec or (3, 4))}


@register_gradcheck("exp")
def _case_exp(rng, spec):
    return exp, {"x": rng.standard_normal(spec or (3, 4))}


@register_gradcheck("softmax")
def _case_softmax(rng, spec):
    return (lambda x: softmax(x, axis=-1)), {"x": rng.standard_normal(spec or (3, 5))}


@register_gradcheck("bce_with_logits")
def _case_bce(rng, spec):
    shape = spec or (3, 4)
    targets = rng.uniform(0, 1, shape)
    return (lambda x: bce_with_logits(x, targets)), {"x": rng.standard_normal(shape)}


@register_gradcheck("global_avg_pool")
def _case_gap(rng, spec):
    return global_avg_pool, {"x": rng.standard_normal(spec or (2, 3, 4, 4))}


@register_gradcheck("max_pool")
def _case_max_pool(rng, spec):
    shape = tuple(spec or (2, 2, 4, 4))
    # distinct values keep every window maximum away from ties
    values = rng.permutation(int(np.prod(shape))).astype(np.float64) * 0.1
    return (lambda x: max_pool(x, 3, 1, 1)), {"x": values.reshape(shape)}


@register_gradcheck("nearest_upsample")
def _case_upsample(rng, spec):
    return nearest_upsample, {"x": rng.standard_normal(spec or (2, 3, 3, 3))}


@register_gradcheck("add")
def _case_add(rng, spec):
    B, C, H, W = spec or (2, 3, 4, 4)
    return add, {"a": rng.standard_normal((B, C, H, W)), "b": rng.standard_normal((B, C, 1, 1))}


@register_gradcheck("mul")
def _case_mul(rng, spec):
    B, C, H, W = spec or (2, 3, 4, 4)
    return mul, {"a": rng.standard_normal((B, C, H, W)), "b": rng.standard_normal((B, C, 1, 1))}


@register_gradcheck("div")
def _case_div(rng, spec):
    shape = spec or (3, 4)
    return div, {"a": rng.standard_normal(shape), "b": rng.uniform(0.5, 1.5, shape) * rng.choice([-1.0, 1.0], size=shape)}


@register_gradcheck("minimum")
def _case_minimum(rng, spec):
    shape = spec or (3, 4)
    a = rng.standard_normal(shape)
    return minimum, {"a": a, "b": a + _away_from_zero(rng, shape)}


@register_gradcheck("maximum")
def _case_maximum(rng, spec):
    shape = spec or (3, 4)
    a = rng.standard_normal(shape)
    return maximum, {"a": a, "b": a + _away_from_zero(rng, shape)}


@register_gradcheck("sum")
def _case_sum(rng, spec):
    return (lambda x: sum(x, axis=1)), {"x": rng.standard_normal(spec or (3, 4))}


@register_gradcheck("reshape", exact=True)
def _case_reshape(rng, spec):
    shape = tuple(spec or (2, 3, 4))
    return (lambda x: reshape(x, (shape[0], -1))), {"x": rng.standard_normal(shape)}


@register_gradcheck("permute", exact=True)
def _case_permute(rng, spec):
    return (lambda x: permute(x, (2, 0, 1))), {"x": rng.standard_normal(spec or (2, 3, 4))}


@register_gradcheck("take", exact=True)
def _case_take(rng, spec):
    shape = tuple(spec or (2, 3, 6))
    order = rng.permutation(shape[-1])
    return (lambda x: take(x, order, axis=-1)), {"x": rng.standard_normal(shape)}


@register_gradcheck("concat", exact=True)
def _case_concat(rng, spec):
    B, C, H, W = spec or (2, 2, 3, 3)
    return (lambda a, b: concat([a, b], axis=1)), {"a": rng.standard_normal((B, C, H, W)),
                                                   "b": rng.standard_normal((B, C + 1, H, W))}


@register_gradcheck("split_channels", exact=True)
def _case_split(rng, spec):
    B, C, H, W = spec or (2, 4, 3, 3)
    return (lambda x: concat(split_channels(x, 2)[::-1], axis=1)), {"x": rng.standard_normal((B, C, H, W))}


# =========================
# Serialization
# =========================
def write_tensor(fh, array) -> None:
    """8-byte magic, u32 rank, u32 extents, f32 payload, little-endian."""
    arr = np.ascontiguousarray(array.data if isinstance(array, Tensor) else array, dtype="<f4")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    header = fh.read(4)
    if len(header) != 4:
        raise ValueError("truncated tensor header")
    (rank,) = struct.unpack("<I", header)
    extents = fh.read(4 * rank)
    if len(extents) != 4 * rank:
        raise ValueError("truncated tensor header")
    shape = struct.unpack(f"<{rank}I", extents) if rank else ()
    count = int(np.prod(shape, dtype=np.int64))
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError(f"truncated tensor payload: expected {4 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)


def save_tensor(path: str, tensor) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, tensor)


def load_tensor(path: str) -> Tensor:
    with open(path, "rb") as fh:
        return Tensor(read_tensor(fh))
