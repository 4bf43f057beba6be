"""Dense f64 tensors with a recorded tape and reverse-mode differentiation.

Every differentiable operator lives in ``OPS``; each one computes its forward
value with numpy and registers a backward closure on the current tape.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from . import _kernels as K

L2_FLOOR = 1e-12
_LAYOUT_OPS = frozenset({"reshape", "transpose", "index", "concat"})


class ShapeError(ValueError):
    """Raised when an op receives inputs with incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class TapeError(RuntimeError):
    """Raised on misuse of the tape (non-scalar loss, double backward)."""


@dataclass
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed ops. Inputs always precede their consumers."""

    def __init__(self) -> None:
        self.records: list[Node] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)

    def record(self, node: Node) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward(); call reset() first")
        self.records.append(node)

    def reset(self) -> None:
        self.records = []
        self.consumed = False

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("backward() called twice without resetting the tape")
        if not loss.requires_grad:
            raise TapeError("loss does not depend on any tensor that requires grad")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.records):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            node.output.grad = g
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # whatever is left has no producing node on this tape: leaves
        produced = {id(n.output) for n in self.records}
        for node in self.records:
            for inp in node.inputs:
                key = id(inp)
                if key in grads and key not in produced:
                    g = grads.pop(key)
                    if inp.grad is None:
                        inp.grad = g.copy()
                    else:
                        inp.grad = inp.grad + g
        if id(loss) in grads:  # loss itself is a leaf
            g = grads.pop(id(loss))
            loss.grad = g if loss.grad is None else loss.grad + g
        self.consumed = True


class _State(threading.local):
    def __init__(self) -> None:
        self.tape = Tape()
        self.grad_enabled = True
        self.flops: list[int] | None = None


_state = _State()


def current_tape() -> Tape:
    return _state.tape


def reset_tape() -> Tape:
    _state.tape = Tape()
    return _state.tape


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def count_flops() -> Iterator[list[int]]:
    """Accumulate forward FLOPs of all ops executed inside the block.

    Matmul and conv count 2 per multiply-accumulate; other ops count one per
    output element. The yielded list holds a single running total.
    """
    prev = _state.flops
    box = [0]
    _state.flops = box
    try:
        yield box
    finally:
        _state.flops = prev


def _add_flops(n: int) -> None:
    if _state.flops is not None:
        _state.flops[0] += int(n)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None) -> None:
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            else data.astype(np.float64, copy=False)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(self.data) if requires_grad else None
        self.name = name

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
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add_scalar(self, other) if _is_scalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if _is_scalar(other):
            return add_scalar(self, -float(other))
        return add(self, mul_scalar(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), float(other))

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __mul__(self, other):
        return mul_scalar(self, other) if _is_scalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not _is_scalar(other):
            raise TypeError("Tensor division is only defined by a python scalar")
        return mul_scalar(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    # layout ops only move values that were already checked; for the rest the sum is
    # a cheap screen, finite whenever every entry is unless it overflows
    if op not in _LAYOUT_OPS and not np.isfinite(out.sum()) and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    if _state.flops is not None and op not in ("matmul", "linear", "conv2d"):
        _add_flops(out.size)
    t = Tensor(out)
    if _state.grad_enabled and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        _state.tape.record(Node(op, inputs, t, backward_fn))
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------- ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make("add", a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make("mul", a.data * b.data, (a, b), bw)


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _make("add_scalar", x.data + float(c), (x,), lambda g: (g,))


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("mul_scalar", x.data * c, (x,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting rules)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape[-1]} vs {b.shape[-2]}) "
                         f"for shapes {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None
    _add_flops(2 * out.size * a.shape[-1])

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` for 2-D ``x``; one output buffer instead of two."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.shape} does not match output width {weight.shape[1]}")
    out = x.data @ weight.data
    if bias is not None:
        out += bias.data
    _add_flops(2 * out.size * x.shape[1])

    def bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = np.ones(g.shape[0]) @ g if bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make("linear", out, inputs, bw)


def _norm_axis(axis: int, ndim: int) -> int:
    return axis + ndim if axis < 0 else axis


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    ax = _norm_axis(axis, tensors[0].ndim)
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(s)) if i != ax):
            raise ShapeError(f"concat: shapes {tuple(ref)} and {t.shape} differ off axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                out.append(g[tuple(sl)])
            else:
                out.append(None)
        return out

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def index(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) slicing; the backward scatters into a zero buffer."""
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not (isinstance(k, (int, np.integer, slice)) or k is Ellipsis):
            raise TypeError("index: only ints, slices and Ellipsis are supported")
    try:
        out = x.data[key]
    except IndexError as e:
        raise ShapeError(f"index: {e} for shape {x.shape}") from None

    def bw(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return _make("index", np.array(out), (x,), bw)


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    ax = _norm_axis(axis, x.ndim)
    if sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to {x.shape[ax]} on axis {ax}")
    out, lo = [], 0
    for n in sizes:
        sl = [slice(None)] * x.ndim
        sl[ax] = slice(lo, lo + n)
        out.append(index(x, tuple(sl)))
        lo += n
    return out


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None or len(axes) == 0:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) for a in axes)
    if sorted(_norm_axis(a, x.ndim) for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for shape {x.shape}")
    inv = np.argsort([_norm_axis(a, x.ndim) for a in axes])
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / count,)

    return _make("mean", np.asarray(out), (x,), bw)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    m = mean(x, axis=axis, keepdims=keepdims)
    return mul_scalar(m, x.data.size // max(m.data.size, 1))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    xr = K.rows(x.data)
    s = np.empty_like(xr)
    K.softmax_fwd(xr, s)

    def bw(g):
        gx = np.empty_like(s)
        K.softmax_bwd(s, K.rows(g), gx)
        return (gx.reshape(x.shape),)

    return _make("softmax", s.reshape(x.shape), (x,), bw)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    c = x.shape[-1]
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: affine shapes {weight.shape}/{bias.shape} do not match last dim {c}")
    xr = K.rows(x.data)
    out, xhat = np.empty_like(xr), np.empty_like(xr)
    inv = np.empty(len(xr))
    K.layer_norm_fwd(xr, weight.data, bias.data, float(eps), out, xhat, inv)

    def bw(g):
        gx, gw, gb = np.empty_like(xhat), np.zeros(c), np.zeros(c)
        K.layer_norm_bwd(K.rows(g), weight.data, xhat, inv, gx, gw, gb)
        return (gx.reshape(x.shape) if x.requires_grad else None,
                gw if weight.requires_grad else None,
                gb if bias.requires_grad else None)

    return _make("layer_norm", out.reshape(x.shape), (x, weight, bias), bw)


def gelu(x: Tensor) -> Tensor:
    """tanh-form GELU, evaluated as x * sigmoid(2z) since 0.5 (1 + tanh z) = sigmoid(2z)."""
    xd = np.ascontiguousarray(x.data)
    out, sig = np.empty_like(xd), np.empty_like(xd)
    K.gelu_fwd(xd, out, sig)

    def bw(g):
        gx = np.empty_like(xd)
        K.gelu_bwd(xd, sig, np.ascontiguousarray(g), gx)
        return (gx,)

    return _make("gelu", out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def l2_normalize(x: Tensor) -> Tensor:
    """Unit-normalise along the last axis, guarding the norm with ``L2_FLOOR``."""
    raw = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    n = np.maximum(raw, L2_FLOOR)
    y = x.data / n

    def bw(g):
        proj = np.where(raw > L2_FLOOR, y * (g * y).sum(axis=-1, keepdims=True), 0.0)
        return ((g - proj) / n,)

    return _make("l2_normalize", y, (x,), bw)


def abs_sum(x: Tensor) -> Tensor:
    # sign(0) == 0 is the subgradient at ties
    return _make("abs_sum", np.asarray(np.abs(x.data).sum()), (x,),
                 lambda g: (g * np.sign(x.data),))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make("log", out, (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def _upsample_matrix(n: int) -> np.ndarray:
    # align_corners=False: src = (dst + 0.5) / 2 - 0.5, clamped at the borders
    m = np.zeros((2 * n, n))
    for dst in range(2 * n):
        src = max((dst + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        lam = src - i0
        m[dst, i0] += 1.0 - lam
        m[dst, i1] += lam
    return m


def bilinear_upsample_2x(x: Tensor) -> Tensor:
    """``(..., H, W, C) -> (..., 2H, 2W, C)``, align-corners-false bilinear."""
    if x.ndim < 3:
        raise ShapeError(f"bilinear_upsample_2x: need (..., H, W, C), got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    if h < 1 or w < 1 or x.shape[-1] < 1:
        raise ShapeError(f"bilinear_upsample_2x: empty spatial dims in {x.shape}")
    uh, uw = _upsample_matrix(h), _upsample_matrix(w)
    out = np.einsum("ph,...hwc->...pwc", uh, x.data)
    out = np.einsum("qw,...pwc->...pqc", uw, out)

    def bw(g):
        gx = np.einsum("qw,...pqc->...pwc", uw, g)
        return (np.einsum("ph,...pwc->...hwc", uh, gx),)

    return _make("bilinear_upsample_2x", out, (x,), bw)


def patch_merge(x: Tensor) -> Tensor:
    """2x2 space-to-channel: ``(..., H, W, C) -> (..., H/2, W/2, 4C)``."""
    if x.ndim < 3:
        raise ShapeError(f"patch_merge: need (..., H, W, C), got {x.shape}")
    *lead, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"patch_merge: spatial dims {h}x{w} must be even")
    nl = len(lead)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4)
    out = x.data.reshape(*lead, h // 2, 2, w // 2, 2, c).transpose(perm)
    out = out.reshape(*lead, h // 2, w // 2, 4 * c)

    def bw(g):
        g = g.reshape(*lead, h // 2, w // 2, 2, 2, c).transpose(perm)
        return (g.reshape(x.shape),)

    return _make("patch_merge", out, (x,), bw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution on ``(B, H, W, Cin)`` with a ``(k, k, Cin, Cout)`` kernel.

    Only k=1 and k=3 (zero padding 1) are supported.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be (B, H, W, C), got {x.shape}")
    if weight.ndim != 4 or weight.shape[0] != weight.shape[1] or weight.shape[0] not in (1, 3):
        raise ShapeError(f"conv2d: kernel must be (1|3, 1|3, Cin, Cout), got {weight.shape}")
    k, _, cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape[-1]} != kernel Cin {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    b, h, w, _ = x.shape
    if k == 1:
        cols = x.data
    else:
        xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
        cols = np.concatenate([xp[:, dy:dy + h, dx:dx + w, :]
                               for dy in range(3) for dx in range(3)], axis=-1)
    cols2 = cols.reshape(-1, k * k * cin)
    w2 = weight.data.reshape(k * k * cin, cout)
    out = cols2 @ w2
    if bias is not None:
        out = out + bias.data
    _add_flops(2 * cols2.shape[0] * w2.size)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (cols2.T @ g2).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gc = (g2 @ w2.T).reshape(b, h, w, k * k, cin)
            if k == 1:
                gx = gc.reshape(x.shape)
            else:
                gp = np.zeros((b, h + 2, w + 2, cin))
                for i, (dy, dx) in enumerate((dy, dx) for dy in range(3) for dx in range(3)):
                    gp[:, dy:dy + h, dx:dx + w, :] += gc[..., i, :]
                gx = gp[:, 1:-1, 1:-1, :]
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make("conv2d", out.reshape(b, h, w, cout), inputs, bw)


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "linear": linear,
    "conv2d": conv2d,
    "add": add,
    "mul": mul,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "index": index,
    "reshape": reshape,
    "transpose": transpose,
    "mean": mean,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "relu": relu,
    "l2_normalize": l2_normalize,
    "abs_sum": abs_sum,
    "log": log,
    "exp": exp,
    "bilinear_upsample_2x": bilinear_upsample_2x,
    "patch_merge": patch_merge,
    "add_scalar": add_scalar,
    "mul_scalar": mul_scalar,
}


def forward(op: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Dispatch ``op`` by name; see ``OPS`` for the closed operator set."""
    try:
        fn = OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **kwargs)


def backward(loss: Tensor) -> None:
    _state.tape.backward(loss)


def stop_gradient(x) -> Tensor:
    return Tensor(x.data if isinstance(x, Tensor) else x)
