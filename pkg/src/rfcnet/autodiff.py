"""
Minimal reverse-mode autodiff over dense numpy arrays.

Feature maps are rank-4 ``(batch, channels, height, width)`` arrays; parameters
and losses use whatever rank they need. Every op records a closure on the
output tensor that maps the output gradient to one gradient per parent, and
:func:`backward` replays those closures in reverse topological order.

The element type is a property of each tensor (float32 for training, float64
for gradient checking); ops never silently promote between the two.
"""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, DimensionError, GraphStateError

_FLOAT_TYPES = (np.float32, np.float64)

_state = {
    "grad_enabled": True,
    "debug": os.environ.get("RFCNET_DEBUG", "") not in ("", "0"),
}


def set_debug(enabled: bool) -> None:
    """Turn the post-op finiteness check on or off."""
    _state["debug"] = bool(enabled)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording a graph (evaluation, finite differences)."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


class Tensor:
    """A numpy array plus an optional gradient buffer and the op that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def abs(self) -> "Tensor":
        return tensor_abs(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def backward(self) -> None:
        backward(self)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _result(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    if _state["debug"] and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError("non-finite values produced from finite inputs")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _require_rank4(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op}: expected a (batch, channels, height, width) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), back)


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,))


def tensor_abs(x: Tensor) -> Tensor:
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def tensor_sum(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).copy(),))


def tensor_mean(x: Tensor) -> Tensor:
    n = x.size

    def back(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _result(np.asarray(x.data.mean(), dtype=x.dtype), (x,), back)


def gather_flat(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick elements of ``x`` by flat (row-major) index; gradient scatters back."""
    index = np.asarray(index, dtype=np.intp)

    def back(g):
        out = np.zeros(x.size, dtype=x.dtype)
        np.add.at(out, index, g)
        return (out.reshape(x.shape),)

    return _result(x.data.reshape(-1)[index], (x,), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                   lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# channel plumbing
# ---------------------------------------------------------------------------


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate rank-4 tensors along the channel axis, keeping order."""
    if not parts:
        raise ArgumentError("concat_channels needs at least one tensor")
    for p in parts:
        _require_rank4(p, "concat_channels")
    ref = parts[0].shape
    for i, p in enumerate(parts[1:], start=1):
        if (p.shape[0], p.shape[2], p.shape[3]) != (ref[0], ref[2], ref[3]):
            raise DimensionError(
                f"concat_channels: part {i} has (batch, height, width) = "
                f"{(p.shape[0], p.shape[2], p.shape[3])}, expected {(ref[0], ref[2], ref[3])}"
            )
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=1), tuple(parts), back)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _require_rank4(x, "slice_channels")
    if not 0 <= start <= stop <= x.shape[1]:
        raise DimensionError(f"slice_channels: [{start}, {stop}) outside channel axis of size {x.shape[1]}")

    def back(g):
        out = np.zeros(x.shape, dtype=x.dtype)
        out[:, start:stop] = g
        return (out,)

    return _result(x.data[:, start:stop], (x,), back)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


@dataclass
class ConvKernel:
    """Weights ``(out_ch, in_ch, k, k)`` with optional bias; padding defaults to (k-1)/2."""

    weight: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: Optional[int] = None

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise DimensionError(f"conv weight must be (out_ch, in_ch, k, k), got {self.weight.shape}")
        if self.k % 2 == 0:
            raise ArgumentError(f"kernel size must be odd, got {self.k}")
        if self.stride < 1:
            raise ArgumentError(f"stride must be positive, got {self.stride}")
        if self.padding is None:
            self.padding = (self.k - 1) // 2
        if self.padding < 0:
            raise ArgumentError(f"padding must be non-negative, got {self.padding}")
        if self.bias is not None and self.bias.shape != (self.out_ch,):
            raise DimensionError(f"bias shape {self.bias.shape} does not match out_ch={self.out_ch}")

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    def parameters(self) -> list:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self)


INIT_SCHEMES = ("he", "fan_in")


def init_conv_kernel(in_ch: int, out_ch: int, k: int, rng: np.random.Generator,
                     bias: bool = True, dtype=np.float32, init: str = "he") -> ConvKernel:
    """Uniform initialisation with fan_in = in_ch * k * k.

    ``"fan_in"`` draws weights from +-sqrt(1 / fan_in); ``"he"`` from
    +-sqrt(6 / fan_in), which keeps activation variance roughly constant through
    ReLU layers. Biases always use +-sqrt(1 / fan_in).
    """
    if init not in INIT_SCHEMES:
        raise ArgumentError(f"init must be one of {INIT_SCHEMES}, got {init!r}")
    fan_in = in_ch * k * k
    bound = np.sqrt(1.0 / fan_in)
    w_bound = np.sqrt(6.0 / fan_in) if init == "he" else bound
    w = rng.uniform(-w_bound, w_bound, size=(out_ch, in_ch, k, k)).astype(dtype)
    b = rng.uniform(-bound, bound, size=(out_ch,)).astype(dtype) if bias else None
    return ConvKernel(Tensor(w, requires_grad=True),
                      Tensor(b, requires_grad=True) if b is not None else None)


def conv2d(x: Tensor, kernel: ConvKernel) -> Tensor:
    """2-D cross-correlation (no kernel flip) via im2col + one matmul."""
    _require_rank4(x, "conv2d")
    n, c, h, w = x.shape
    o, ci, k, _ = kernel.weight.shape
    if c != ci:
        raise DimensionError(f"conv2d: input channel axis (axis 1) has {c}, kernel in_ch axis expects {ci}")
    s, p = kernel.stride, kernel.padding
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: height/width axes ({h}, {w}) too small for k={k}, padding={p}")
    wmat = kernel.weight.data.reshape(o, c * k * k)
    bias = kernel.bias

    if k == 1 and s == 1 and p == 0:
        cols = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)

    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    parents = (x, kernel.weight) if bias is None else (x, kernel.weight, bias)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        dw = (g2.T @ cols).reshape(kernel.weight.shape) if kernel.weight.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = g2 @ wmat
            if k == 1 and s == 1 and p == 0:
                dx = dcols.reshape(n, h, w, c).transpose(0, 3, 1, 2)
            else:
                dcols = dcols.reshape(n, ho, wo, c, k, k)
                dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return _result(out, parents, back)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max-pool, stride 2. Odd sizes are padded right/bottom with -inf.

    Gradient goes to the first (row-major) maximal element of each window.
    """
    _require_rank4(x, "maxpool2")
    n, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    data = x.data
    if ph or pw:
        data = np.pad(data, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=-np.inf)
    h2, w2 = (h + ph) // 2, (w + pw) // 2
    win = data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def back(g):
        scat = np.zeros((n, c, h2, w2, 4), dtype=x.dtype)
        np.put_along_axis(scat, idx[..., None], g[..., None], axis=-1)
        full = scat.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        return (full[:, :, :h, :w],)

    return _result(np.ascontiguousarray(out), (x,), back)


def interp_matrix(in_size: int, factor: int, dtype=np.float64) -> np.ndarray:
    """Row i holds the linear-interpolation weights of output i (align_corners=False)."""
    out_size = in_size * factor
    mat = np.zeros((out_size, in_size), dtype=dtype)
    for i in range(out_size):
        src = max((i + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        mat[i, i0] += 1.0 - frac
        mat[i, i1] += frac
    return mat


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ArgumentError(f"upsample factor must be a positive integer, got {factor!r}")
    _require_rank4(x, "bilinear_upsample")
    if factor == 1:
        return x
    ah = interp_matrix(x.shape[2], factor, x.dtype)
    aw = interp_matrix(x.shape[3], factor, x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def back(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return _result(out, (x,), back)


# ---------------------------------------------------------------------------
# softmax / cross-entropy
# ---------------------------------------------------------------------------


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels(x: Tensor) -> Tensor:
    _require_rank4(x, "softmax_channels")
    s = _softmax(x.data)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result(s, (x,), back)


def ce_per_pixel(logits: Tensor, target) -> Tensor:
    """Per-pixel cross-entropy ``-log softmax(logits)[target]``, shape (n, h, w)."""
    _require_rank4(logits, "ce_per_pixel")
    target = np.asarray(target)
    n, c, h, w = logits.shape
    if target.shape != (n, h, w):
        raise DimensionError(f"ce_per_pixel: target shape {target.shape} != (batch, height, width) {(n, h, w)}")
    if not np.issubdtype(target.dtype, np.integer):
        raise ArgumentError("ce_per_pixel: target must hold integer class ids")
    if target.size and (target.min() < 0 or target.max() >= c):
        raise ArgumentError(f"ce_per_pixel: class ids must lie in [0, {c}), got range "
                            f"[{target.min()}, {target.max()}]")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    picked = np.take_along_axis(z, target[:, None].astype(np.intp), axis=1)[:, 0]
    loss = lse - picked

    def back(g):
        grad = _softmax(z)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, target[:, None].astype(np.intp), 1.0, axis=1)
        return ((grad - onehot) * g[:, None],)

    return _result(loss.astype(z.dtype, copy=False), (logits,), back)


# ---------------------------------------------------------------------------
# backward / gradient check
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls until zeroed. The recorded graph is
    released afterwards, so a second call on the same loss is a state error.
    """
    if loss.size != 1:
        raise ArgumentError(f"backward needs a single-element loss, got shape {loss.shape}")
    if loss._backward is None:
        raise GraphStateError("backward called on a tensor with no recorded graph")
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None and node.requires_grad:
                g = np.asarray(g, dtype=node.dtype).reshape(node.shape)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        node._parents = ()
        node._backward = None
        node.requires_grad = False


def grad_check(f: Callable, x: Union[Tensor, Sequence[Tensor]], eps: float = 1e-4,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f(x)`` must return a scalar tensor; ``x`` is a float64 tensor or a list of
    them. With ``max_coords`` only that many coordinates per tensor are probed,
    chosen by ``seed``. The error per coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise ArgumentError("grad_check requires float64 tensors")
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    loss = f(x)
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in xs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, a in zip(xs, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(x).data)
                flat[i] = orig - eps
                fm = float(f(x).data)
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                ana = float(a.reshape(-1)[i])
                worst = max(worst, abs(ana - num) / max(1e-8, abs(ana) + abs(num)))
    return worst
