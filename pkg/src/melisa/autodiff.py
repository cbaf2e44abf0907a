"""Dense float64 arrays with reverse-mode gradients and forward-mode JVPs.

Two value types flow through the same op functions:

* :class:`Tensor` records a node on an implicit tape whenever one of its
  inputs requires a gradient. :func:`grad` replays the tape backwards.
* :class:`Dual` carries a primal array and a tangent array. Ops on duals
  propagate tangents eagerly and never build a tape, which is what the
  MeanFlow JVP needs since its result is always wrapped in a stop-gradient.

Mixing is allowed: a ``Tensor`` or plain array entering a dual computation
is treated as a constant (zero tangent). A tangent of ``None`` means zero
and is kept symbolic to skip work on constant sub-graphs.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Dual", "NonFiniteError", "ShapeError",
    "add", "sub", "mul", "div", "neg", "square", "silu", "sin", "cos",
    "linear", "conv2d", "group_norm", "sum", "mean", "concat", "reshape",
    "take", "upsample2", "downsample2", "spectral_project",
    "stop_gradient", "grad", "jvp", "value", "is_dual",
]


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class Tensor:
    """Immutable float64 array, optionally tracked for reverse-mode AD."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.require(data, np.float64, "C")
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self.shape)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __neg__ = lambda a: neg(a)
    __getitem__ = lambda a, idx: take(a, idx)


class Dual:
    """Primal value paired with a tangent of the same shape (``None`` = zero)."""

    __slots__ = ("primal", "tangent")
    __array_priority__ = 100

    def __init__(self, primal, tangent=None):
        self.primal = np.asarray(primal, dtype=np.float64)
        if tangent is not None:
            tangent = np.asarray(tangent, dtype=np.float64)
            if tangent.shape != self.primal.shape:
                try:
                    tangent = np.broadcast_to(tangent, self.primal.shape)
                except ValueError:
                    raise ShapeError(
                        f"tangent shape {tangent.shape} does not match primal {self.primal.shape}"
                    ) from None
        self.tangent = tangent

    @property
    def shape(self) -> tuple[int, ...]:
        return self.primal.shape

    @property
    def ndim(self) -> int:
        return self.primal.ndim

    def tangent_or_zeros(self) -> np.ndarray:
        if self.tangent is None:
            return np.zeros_like(self.primal)
        return np.array(self.tangent)

    def __repr__(self) -> str:
        return f"Dual(shape={self.shape})"

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __neg__ = lambda a: neg(a)
    __getitem__ = lambda a, idx: take(a, idx)


def _scalar_error(shape):
    raise ShapeError(f"item() needs a single element, got shape {shape}")


# ---------------------------------------------------------------------------
# plumbing


def is_dual(*xs) -> bool:
    return any(isinstance(x, Dual) for x in xs)


def value(x) -> np.ndarray:
    """Raw primal array of a Tensor, Dual or array-like."""
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, Dual):
        return x.primal
    return np.asarray(x, dtype=np.float64)


def _pt(x) -> tuple[np.ndarray, np.ndarray | None]:
    if isinstance(x, Dual):
        return x.primal, x.tangent
    return value(x), None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _record(out: np.ndarray, op: str, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    _check_finite(out, op)
    node = Tensor(out)
    if any(p.requires_grad for p in parents):
        node.requires_grad = True
        node._parents = parents
        node._backward = backward
        node.name = op
    return node


def _tadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a} with {b}") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    if is_dual(a, b):
        (pa, ta), (pb, tb) = _pt(a), _pt(b)
        return Dual(pa + pb, _tadd(ta, tb))
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    return _record(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    if is_dual(a, b):
        (pa, ta), (pb, tb) = _pt(a), _pt(b)
        return Dual(pa - pb, _tadd(ta, None if tb is None else -tb))
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    return _record(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    if is_dual(a, b):
        (pa, ta), (pb, tb) = _pt(a), _pt(b)
        return Dual(pa * pb, _tadd(None if ta is None else ta * pb,
                                   None if tb is None else pa * tb))
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    return _record(a.data * b.data, "mul", (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    if is_dual(a, b):
        (pa, ta), (pb, tb) = _pt(a), _pt(b)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = pa / pb
        _check_finite(out, "div")
        tan = _tadd(None if ta is None else ta / pb,
                    None if tb is None else -out * tb / pb)
        return Dual(out, tan)
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _record(out, "div", (a, b), backward)


def neg(a):
    if is_dual(a):
        p, t = _pt(a)
        return Dual(-p, None if t is None else -t)
    a = _as_tensor(a)
    return _record(-a.data, "neg", (a,), lambda g: (-g,))


def square(a):
    if is_dual(a):
        p, t = _pt(a)
        return Dual(p * p, None if t is None else 2.0 * p * t)
    a = _as_tensor(a)
    return _record(a.data * a.data, "square", (a,), lambda g: (2.0 * g * a.data,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a):
    p = value(a)
    s = _sigmoid(p)
    out = p * s
    # d/dx x*sigmoid(x) = s * (1 + x * (1 - s))
    if is_dual(a):
        t = a.tangent
        return Dual(out, None if t is None else t * s * (1.0 + p * (1.0 - s)))
    a = _as_tensor(a)
    return _record(out, "silu", (a,), lambda g: (g * s * (1.0 + p * (1.0 - s)),))


def sin(a):
    p = value(a)
    if is_dual(a):
        t = a.tangent
        return Dual(np.sin(p), None if t is None else t * np.cos(p))
    a = _as_tensor(a)
    return _record(np.sin(p), "sin", (a,), lambda g: (g * np.cos(p),))


def cos(a):
    p = value(a)
    if is_dual(a):
        t = a.tangent
        return Dual(np.cos(p), None if t is None else -t * np.sin(p))
    a = _as_tensor(a)
    return _record(np.cos(p), "cos", (a,), lambda g: (-g * np.sin(p),))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(a, axis=None):
    p = value(a)
    out = p.sum(axis=axis)
    if is_dual(a):
        t = a.tangent
        return Dual(out, None if t is None else t.sum(axis=axis))
    a = _as_tensor(a)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(out), "sum", (a,), backward)


def mean(a, axis=None):
    p = value(a)
    n = p.size if axis is None else int(np.prod([p.shape[i] for i in np.atleast_1d(axis)]))
    out = p.mean(axis=axis)
    if is_dual(a):
        t = a.tangent
        return Dual(out, None if t is None else t.mean(axis=axis))
    a = _as_tensor(a)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _record(np.asarray(out), "mean", (a,), backward)


def reshape(a, shape):
    p = value(a)
    out = p.reshape(shape)
    if is_dual(a):
        t = a.tangent
        return Dual(out, None if t is None else t.reshape(shape))
    a = _as_tensor(a)
    return _record(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def take(a, index):
    """Basic (non-fancy) indexing."""
    p = value(a)
    out = p[index]
    if is_dual(a):
        t = a.tangent
        return Dual(out, None if t is None else t[index])
    a = _as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record(np.array(out), "take", (a,), backward)


def concat(xs: Sequence, axis: int = 1):
    """Concatenate along ``axis`` (the channel axis by default)."""
    prims = [value(x) for x in xs]
    out = np.concatenate(prims, axis=axis)
    if is_dual(*xs):
        tans = [_pt(x)[1] for x in xs]
        if all(t is None for t in tans):
            return Dual(out)
        filled = [np.zeros_like(p) if t is None else t for p, t in zip(prims, tans)]
        return Dual(out, np.concatenate(filled, axis=axis))
    ts = tuple(_as_tensor(x) for x in xs)
    bounds = np.cumsum([p.shape[axis] for p in prims])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, "concat", ts, backward)


def upsample2(a):
    """Nearest-neighbour x2 upsampling over the last two axes."""
    p = value(a)
    out = p.repeat(2, axis=-2).repeat(2, axis=-1)
    if is_dual(a):
        t = a.tangent
        return Dual(out, None if t is None else t.repeat(2, axis=-2).repeat(2, axis=-1))
    a = _as_tensor(a)

    def backward(g):
        s = g.shape
        return (g.reshape(*s[:-2], s[-2] // 2, 2, s[-1] // 2, 2).sum(axis=(-3, -1)),)

    return _record(out, "upsample2", (a,), backward)


def downsample2(a):
    """Nearest-neighbour x2 downsampling (keeps even rows/columns)."""
    p = value(a)
    if p.shape[-1] % 2 or p.shape[-2] % 2:
        raise ShapeError(f"downsample2 needs even spatial extents, got {p.shape[-2:]}")
    out = np.ascontiguousarray(p[..., ::2, ::2])
    if is_dual(a):
        t = a.tangent
        return Dual(out, None if t is None else np.ascontiguousarray(t[..., ::2, ::2]))
    a = _as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., ::2, ::2] = g
        return (full,)

    return _record(out, "downsample2", (a,), backward)


# ---------------------------------------------------------------------------
# layers


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with x of shape (B, in) and weight (in, out)."""
    px, tx = _pt(x)
    pw, tw = _pt(weight)
    pb = None if bias is None else value(bias)
    if px.shape[-1] != pw.shape[0]:
        raise ShapeError(f"linear: input features {px.shape[-1]} != weight rows {pw.shape[0]}")
    out = px @ pw
    if pb is not None:
        out = out + pb
    if is_dual(x, weight, bias):
        tb = None if bias is None else _pt(bias)[1]
        tan = _tadd(None if tx is None else tx @ pw, None if tw is None else px @ tw)
        return Dual(out, _tadd(tan, None if tb is None else np.broadcast_to(tb, out.shape)))
    parents = (_as_tensor(x), _as_tensor(weight)) + (() if bias is None else (_as_tensor(bias),))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ pw.T
        gw = px.reshape(-1, px.shape[-1]).T @ g2
        return (gx, gw) + (() if bias is None else (g2.sum(axis=0),))

    return _record(out, "linear", parents, backward)


def _pad(x: np.ndarray, p: int, padding: str) -> np.ndarray:
    if p == 0:
        return x
    mode = "wrap" if padding == "circular" else "constant"
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode=mode)


def _row_stack(x: np.ndarray, k: int, padding: str) -> np.ndarray:
    """Padded input with the k horizontal shifts stacked on channels: (B, k*C, H+k-1, W)."""
    wd = x.shape[-1]
    xp = _pad(x, k // 2, padding)
    return np.concatenate([xp[:, :, :, j:j + wd] for j in range(k)], axis=1)


def _conv(x: np.ndarray, w: np.ndarray, padding: str, rows: np.ndarray | None = None) -> np.ndarray:
    # one GEMM per kernel row against the row-shifted stack
    b, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    if k == 1:
        return np.matmul(w[:, :, 0, 0], x.reshape(b, ci, h * wd)).reshape(b, co, h, wd)
    if rows is None:
        rows = _row_stack(x, k, padding)
    wm = w.transpose(2, 0, 3, 1).reshape(k, co, k * ci)
    out = np.matmul(wm[0], rows[:, :, 0:h].reshape(b, k * ci, h * wd))
    for i in range(1, k):
        out += np.matmul(wm[i], rows[:, :, i:i + h].reshape(b, k * ci, h * wd))
    return out.reshape(b, co, h, wd)


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int, padding: str,
                      rows: np.ndarray | None = None) -> np.ndarray:
    b, ci, h, wd = x.shape
    co = g.shape[1]
    g2 = g.reshape(b, co, h * wd)
    if k == 1:
        return np.matmul(g2, x.reshape(b, ci, h * wd).transpose(0, 2, 1)).sum(axis=0)[:, :, None, None]
    if rows is None:
        rows = _row_stack(x, k, padding)
    gw = np.empty((k, co, k * ci))
    for i in range(k):
        cols = rows[:, :, i:i + h].reshape(b, k * ci, h * wd)
        gw[i] = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(k, co, k, ci).transpose(1, 3, 0, 2)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, padding: str) -> np.ndarray:
    # adjoint of a same-size correlation: correlate with the flipped, transposed kernel
    return _conv(g, np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]), padding)


def conv2d(x, weight, bias=None, padding: str = "circular"):
    """Same-size 2D cross-correlation.

    x is (B, C_in, H, W) or (C_in, H, W); weight is (C_out, C_in, k, k) with odd k.
    ``padding`` is ``"circular"`` (periodic domains) or ``"zeros"``.
    """
    px, tx = _pt(x)
    pw, tw = _pt(weight)
    if pw.ndim != 4 or pw.shape[2] != pw.shape[3]:
        raise ShapeError(f"conv2d kernel must be (C_out, C_in, k, k), got {pw.shape}")
    k = pw.shape[-1]
    if k % 2 == 0:
        raise ShapeError(f"conv2d kernel size must be odd, got {k}")
    squeeze = px.ndim == 3
    if squeeze:
        px = px[None]
        tx = None if tx is None else tx[None]
    if px.shape[1] != pw.shape[1]:
        raise ShapeError(f"conv2d: input channels {px.shape[1]} != kernel channels {pw.shape[1]}")
    if min(px.shape[-2:]) < k:
        raise ShapeError(f"conv2d: spatial size {px.shape[-2:]} smaller than kernel {k}")
    if padding not in ("circular", "zeros"):
        raise ValueError(f"unknown padding {padding!r}")

    rows = _row_stack(px, k, padding) if k > 1 else None
    out = _conv(px, pw, padding, rows)
    pb = None if bias is None else value(bias)
    if pb is not None:
        out += pb[None, :, None, None]

    if is_dual(x, weight, bias):
        tb = None if bias is None else _pt(bias)[1]
        tan = _tadd(None if tx is None else _conv(tx, pw, padding),
                    None if tw is None else _conv(px, tw, padding, rows))
        if tb is not None:
            tan = _tadd(tan, np.broadcast_to(tb[None, :, None, None], out.shape))
        if squeeze:
            return Dual(out[0], None if tan is None else tan[0])
        return Dual(out, tan)

    parents = (_as_tensor(x), _as_tensor(weight)) + (() if bias is None else (_as_tensor(bias),))

    def backward(g):
        g4 = g[None] if squeeze else g
        gx = _conv_input_grad(g4, pw, padding) if parents[0].requires_grad else None
        gw = _conv_weight_grad(px, g4, k, padding, rows) if parents[1].requires_grad else None
        if squeeze and gx is not None:
            gx = gx[0]
        return (gx, gw) + (() if bias is None else (g4.sum(axis=(0, 2, 3)),))

    return _record(out[0] if squeeze else out, "conv2d", parents, backward)


def group_norm(x, gamma, beta, groups: int, eps: float = 1e-5):
    """Group normalisation over (B, C, H, W) with per-channel affine."""
    px, tx = _pt(x)
    b, c = px.shape[:2]
    if c % groups:
        raise ShapeError(f"group_norm: {groups} groups do not divide {c} channels")
    xg = px.reshape(b, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=2, keepdims=True) + eps)
    xhat = xc * inv
    pg, pbeta = value(gamma), value(beta)
    cshape = (1, c) + (1,) * (px.ndim - 2)
    out = xhat.reshape(px.shape) * pg.reshape(cshape) + pbeta.reshape(cshape)

    if is_dual(x, gamma, beta):
        tan = None
        if tx is not None:
            tg = tx.reshape(b, groups, -1)
            tg = tg - tg.mean(axis=2, keepdims=True)
            dxhat = (tg - xhat * (xhat * tg).mean(axis=2, keepdims=True)) * inv
            tan = dxhat.reshape(px.shape) * pg.reshape(cshape)
        tgam, tbet = _pt(gamma)[1], _pt(beta)[1]
        if tgam is not None:
            tan = _tadd(tan, xhat.reshape(px.shape) * tgam.reshape(cshape))
        if tbet is not None:
            tan = _tadd(tan, np.broadcast_to(tbet.reshape(cshape), px.shape))
        return Dual(out, tan)

    parents = (_as_tensor(x), _as_tensor(gamma), _as_tensor(beta))
    red = (0,) + tuple(range(2, px.ndim))

    def backward(g):
        xh = xhat.reshape(px.shape)
        gg = (g * xh).sum(axis=red)
        gb = g.sum(axis=red)
        gxh = (g * pg.reshape(cshape)).reshape(b, groups, -1)
        gx = (gxh - gxh.mean(axis=2, keepdims=True)
              - xhat * (gxh * xhat).mean(axis=2, keepdims=True)) * inv
        return gx.reshape(px.shape), gg, gb

    return _record(out, "group_norm", parents, backward)


def spectral_project(x, keep: np.ndarray):
    """Project the last two axes onto the Fourier modes where ``keep`` is true.

    ``keep`` is a boolean (H, W) mask in unshifted FFT ordering and must be
    symmetric under k -> -k so real fields stay real. The map is an orthogonal
    projection, hence self-adjoint: its VJP and JVP are the projection itself.
    """
    def proj(a):
        return np.fft.ifft2(np.fft.fft2(a) * keep).real

    p, t = _pt(x)
    out = proj(p)
    if is_dual(x):
        return Dual(out, None if t is None else proj(t))
    x = _as_tensor(x)
    return _record(out, "spectral_project", (x,), lambda g: (proj(g),))


# ---------------------------------------------------------------------------
# differentiation entry points


def stop_gradient(x):
    """Identity on values; blocks reverse-mode gradients (and zeroes tangents)."""
    if isinstance(x, Dual):
        return Dual(x.primal)
    return Tensor(value(x))


def _toposort(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each of ``params``.

    Parameters the loss does not depend on get zero arrays.
    """
    params = list(params)
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise ShapeError(f"grad needs a scalar Tensor loss, got shape {shape}")
    if not loss.requires_grad:
        return [np.zeros_like(p.data) for p in params]

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        if node._backward is None:
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return [grads.get(id(p), np.zeros_like(p.data)).reshape(p.shape) for p in params]


def jvp(f: Callable, primals: Sequence, tangents: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate ``f`` and its directional derivative along ``tangents``.

    Every argument becomes a :class:`Dual`; tensors captured by ``f`` (network
    parameters) act as constants. Returns ``(value, tangent)`` as arrays.
    """
    if len(primals) != len(tangents):
        raise ShapeError("jvp: primals and tangents differ in length")
    duals = []
    for p, t in zip(primals, tangents):
        p = value(p)
        t = np.asarray(t, dtype=np.float64)
        if t.shape != p.shape:
            raise ShapeError(f"jvp: direction shape {t.shape} != input shape {p.shape}")
        duals.append(Dual(p, t))
    out = f(*duals)
    if isinstance(out, Dual):
        return out.primal, out.tangent_or_zeros()
    val = value(out)
    return val, np.zeros_like(val)


def numeric_jvp(f: Callable[..., np.ndarray], primals: Sequence, tangents: Sequence,
                h: float = 1e-3) -> np.ndarray:
    """Central finite-difference directional derivative (test oracle)."""
    plus = [value(p) + h * np.asarray(t) for p, t in zip(primals, tangents)]
    minus = [value(p) - h * np.asarray(t) for p, t in zip(primals, tangents)]
    return (value(f(*plus)) - value(f(*minus))) / (2.0 * h)

