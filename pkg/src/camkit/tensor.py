"""Dense tensors with reverse-mode differentiation.

Only what small convolutional embedding networks and their losses need:
broadcasting arithmetic, reductions, reshaping, 2-D convolutions (full and
depthwise), channel reduction, adaptive average pooling, normalisation
building blocks and a stabilised log-sum-exp.

Each op records a closure that maps the output gradient to its parents'
gradients; :func:`backward` replays them in reverse topological order.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class EmptyTensorError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """An op on finite inputs produced NaN or Inf."""


class StaleGraphError(RuntimeError):
    """backward() was called on a graph that has already been consumed."""


class GradContractError(RuntimeError):
    pass


DEFAULT_DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

    # -- basic properties ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        # scalars adopt the dtype of whatever they are combined with
        return Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))
    return Tensor(x, dtype=dtype)


def _scalar_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
    out.grad = None
    out.name = None
    out._op = op
    out._consumed = False
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _scalar_like(a, b)
    b = b if isinstance(b, Tensor) else _scalar_like(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _scalar_like(a, b)
    b = b if isinstance(b, Tensor) else _scalar_like(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _scalar_like(a, b)
    b = b if isinstance(b, Tensor) else _scalar_like(b, a)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _scalar_like(a, b)
    b = b if isinstance(b, Tensor) else _scalar_like(b, a)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return _make(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(out, (a,), bw, "gelu")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    if n == 0:
        raise EmptyTensorError(f"mean over empty axes {axes} of shape {a.shape}")
    return tsum(a, axes, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    dtype = a.dtype

    basic = _is_basic_index(index)

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(np.array(a.data[index]), (a,), bw, "getitem")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise EmptyTensorError("concat of zero tensors")
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _make(
        data,
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
        "stack",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise DimensionError(f"matmul shapes {ad.shape} and {bd.shape} do not align")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw, "matmul")


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(a))) along ``axis`` with max subtraction."""
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = e / s
    return _make(out, (a,), lambda g: (np.expand_dims(g, axis) * soft,), "logsumexp")


def l2_normalize(a: Tensor, axis: int = -1, label: str = "row") -> Tensor:
    """Divide by the L2 norm along ``axis``; zero-norm slices are an error."""
    sq = (a.data * a.data).sum(axis=axis, keepdims=True)
    if (sq == 0).any():
        bad = np.argwhere(sq.reshape(-1) == 0).ravel().tolist()
        raise ZeroDivisionError(f"zero-norm {label}(s) at index {bad}")
    return a * (tsum(a * a, axis, keepdims=True) ** -0.5)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected [C,H,W] or [B,C,H,W] input, got shape {x.shape}")
    return x, False


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _out_extent(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _col2im(dwin: np.ndarray, shape, k: int, s: int, p: int, ho: int, wo: int) -> np.ndarray:
    # dwin: (B, C, ho, wo, k, k) -> gradient w.r.t. padded input, cropped
    b, c, h, w = shape
    dx = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=dwin.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dwin[..., i, j]
    if p:
        dx = dx[:, :, p:-p, p:-p]
    return dx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` ([C,H,W] or [B,C,H,W]) with ``weight`` [O,C,k,k].

    ``padding`` adds that many zero rows/columns on every side.
    """
    xb, squeeze = _as_batch(x)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"weights must be [C_out,C_in,k,k], got {weight.shape}")
    o, c, k, _ = weight.shape
    b, cx, h, w = xb.shape
    if c != cx:
        raise DimensionError(f"input shape {x.shape} has {cx} channels but weights {weight.shape} expect {c}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(f"kernel {weight.shape} larger than input {x.shape}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"bias shape {bias.shape} does not match weights {weight.shape}")
    ho, wo = _out_extent(h, k, stride, padding), _out_extent(w, k, stride, padding)

    xp = _pad(xb.data, padding)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    wmat = weight.data.reshape(o, c * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2)

    xshape = xb.shape

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(weight.shape)
        dcols = (gm @ wmat).reshape(b, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
        gx = _col2im(dcols, xshape, k, stride, padding, ho, wo)
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    parents = (xb, weight) if bias is None else (xb, weight, bias)
    res = _make(out, parents, bw, "conv2d")
    return reshape(res, res.shape[1:]) if squeeze else res


def depthwise_conv2d(x: Tensor, filters: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Grouped convolution with one group per input channel.

    ``filters`` is [C*M,1,k,k]; input channel c produces output channels
    c*M .. c*M+M-1 (M=1 is the classic one-filter-per-channel case).
    """
    xb, squeeze = _as_batch(x)
    b, c, h, w = xb.shape
    if filters.ndim != 4 or filters.shape[1] != 1:
        raise DimensionError(f"depthwise filters must be [C*M,1,k,k], got {filters.shape}")
    cm, _, k, _ = filters.shape
    if c == 0 or cm % c != 0:
        raise DimensionError(f"filters {filters.shape} do not match input channels of {x.shape}")
    m = cm // c
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(f"kernel {filters.shape} larger than input {x.shape}")
    ho, wo = _out_extent(h, k, stride, padding), _out_extent(w, k, stride, padding)

    xp = _pad(xb.data, padding)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (C, B*ho*wo, k*k)
    cols = win.transpose(1, 0, 2, 3, 4, 5).reshape(c, b * ho * wo, k * k)
    fmat = filters.data.reshape(c, m, k * k)
    out = np.matmul(cols, fmat.transpose(0, 2, 1))  # (C, BHW, M)
    out = out.reshape(c, b, ho, wo, m).transpose(1, 0, 4, 2, 3).reshape(b, c * m, ho, wo)

    xshape = xb.shape

    def bw(g):
        gm = g.reshape(b, c, m, ho, wo).transpose(1, 0, 3, 4, 2).reshape(c, b * ho * wo, m)
        gf = np.matmul(gm.transpose(0, 2, 1), cols).reshape(filters.shape)
        dcols = np.matmul(gm, fmat).reshape(c, b, ho, wo, k, k).transpose(1, 0, 2, 3, 4, 5)
        return _col2im(dcols, xshape, k, stride, padding, ho, wo), gf

    res = _make(out, (xb, filters), bw, "depthwise_conv2d")
    return reshape(res, res.shape[1:]) if squeeze else res


def channel_mean(x: Tensor, axis: int = -3, keepdims: bool = True) -> Tensor:
    """Average over the channel axis ([C,H,W] -> [1,H,W] by default)."""
    if x.ndim == 0 or x.shape[axis] == 0:
        raise EmptyTensorError(f"channel_mean over zero channels, shape {x.shape}")
    n = x.shape[axis]
    # summing in sorted order makes the result independent of channel order, bit for bit
    out = np.sort(x.data, axis=axis).sum(axis=axis, keepdims=keepdims) / n
    shape = x.shape

    def bw(g):
        g = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(out, (x,), bw, "channel_mean")


def _pool_bounds(n: int, m: int) -> list[tuple[int, int]]:
    return [((i * n) // m, -((-(i + 1) * n) // m)) for i in range(m)]


def adaptive_avg_pool(x: Tensor, out: tuple[int, int]) -> Tensor:
    """Mean over floor/ceil windows so the last two axes become ``out``."""
    oh, ow = out
    h, w = x.shape[-2:]
    if not (1 <= oh <= h and 1 <= ow <= w):
        raise DimensionError(f"output extent {out} not within input spatial extent {(h, w)}")
    xd = x.data
    if (oh, ow) == (1, 1):
        res = xd.mean(axis=(-2, -1), keepdims=True)

        def bw(g):
            return (np.broadcast_to(g / (h * w), xd.shape).copy(),)

        return _make(res, (x,), bw, "adaptive_avg_pool")

    rows, cols = _pool_bounds(h, oh), _pool_bounds(w, ow)
    res = np.empty(xd.shape[:-2] + (oh, ow), dtype=xd.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            res[..., i, j] = xd[..., r0:r1, c0:c1].mean(axis=(-2, -1))

    def bw(g):
        gx = np.zeros_like(xd)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                n = (r1 - r0) * (c1 - c0)
                gx[..., r0:r1, c0:c1] += (g[..., i, j] / n)[..., None, None]
        return (gx,)

    return _make(res, (x,), bw, "adaptive_avg_pool")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation of a [B,C,H,W] tensor.

    In training mode the batch statistics are used and the running buffers
    (when given) are updated in place; otherwise the running buffers are used.
    """
    c = x.shape[1]
    bshape = (1, c, 1, 1)
    if training:
        mu = tmean(x, (0, 2, 3), keepdims=True)
        xc = x - mu
        var = tmean(xc * xc, (0, 2, 3), keepdims=True)
        xhat = xc * ((var + eps) ** -0.5)
        if running_mean is not None:
            n = x.size // c
            unbiased = var.data.reshape(c) * (n / max(n - 1, 1))
            running_mean *= 1 - momentum
            running_mean += momentum * mu.data.reshape(c)
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        scale = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - Tensor(running_mean.reshape(bshape).astype(x.dtype))) * Tensor(
            scale.reshape(bshape).astype(x.dtype)
        )
    return xhat * reshape(gamma, bshape) + reshape(beta, bshape)


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Returns a map from leaf name (or ``id`` string for unnamed leaves) to the
    gradient contributed by this pass. The recorded graph is released
    afterwards; a second call on the same loss raises StaleGraphError.
    """
    if loss.size != 1:
        raise GradContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise StaleGraphError("graph already consumed by a previous backward(); re-run the forward pass")
    if not loss.requires_grad:
        raise GradContractError("loss does not depend on any tensor with requires_grad=True")

    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                key = node.name or str(id(node))
                result[key] = result[key] + g if key in result else g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        node._backward = None
        node._parents = ()
        node._consumed = True
    loss._consumed = True
    return result


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], p: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of df/dp, one coordinate at a time.

    ``p.data`` is perturbed in place and restored.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    flat = p.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)

    def ev() -> float:
        v = f(p)
        v = v.item() if isinstance(v, Tensor) else float(v)
        if not math.isfinite(v):
            raise NonFiniteError("objective returned a non-finite value")
        return v

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = ev()
        flat[i] = orig - step
        fm = ev()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return out.reshape(p.shape)


def parameters_size(params: Iterable[Tensor]) -> int:
    return int(sum(p.size for p in params))
