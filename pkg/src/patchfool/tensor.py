"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When at least one input requires a
gradient, the result carries a :class:`Node` linking it to its parents and a
closure that maps the output cotangent to parent cotangents. :func:`backward`
orders the reachable nodes into a :class:`Tape` and replays it in reverse.

Gradient contract: ``backward`` *accumulates* into ``leaf.grad``. Callers zero
the buffers (:func:`zero_grad`) before each pass; :func:`grad` does this for
you and returns fresh arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Node:
    """Record of the op that produced a tensor."""

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "grad", "node", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(s <= 0 for s in arr.shape):
            raise ValueError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f"op={self.node.op}" if self.node else "leaf"
        return f"Tensor(shape={self.shape}, {tag})"

    # arithmetic sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out.node = Node(op, parents, backward_fn) if out.requires_grad else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _result(ad * bd, "mul", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _result(x * cdf, "gelu", (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.log(x), "log", (a,), lambda g: (g / x,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matmul over leading axes; both operands need ndim >= 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    # weight shared across a batch: fold leading axes into rows (one BLAS call)
    shared = ad.ndim > 2 and bd.ndim == 2
    if shared:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        try:
            out = np.matmul(ad, bd)
        except ValueError:
            raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if shared:
                ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if shared:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _result(out, "matmul", (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape ``[..., k]`` and a 2-D weight."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias shape {bias.shape} does not match {weight.shape}")
    xd, wd = x.data, weight.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if bias is not None:
        out += bias.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = [(g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None,
                 x2.T @ g2 if weight.requires_grad else None]
        if bias is not None:
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)

    return _result(out, "linear", parents, bw)


# ---------------------------------------------------------------- reductions / normalisation

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.full(shape, g.reshape(-1)[0]),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out, dtype=DTYPE).reshape(out.shape or (1,)), "sum", (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if a.shape[-1] == 0:
        raise ValueError("softmax: empty last axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, "softmax", (a,), bw)


def layer_norm(a: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply the affine map."""
    x = a.data
    n = x.shape[-1]
    if n == 0:
        raise ValueError("layer_norm: empty last axis")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    w = weight.data if weight is not None else None
    out = xhat if w is None else xhat * w
    if bias is not None:
        out = out + bias.data
    parents = tuple(t for t in (a, weight, bias) if t is not None)

    def bw(g):
        gx = g if w is None else g * w
        da = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [da if a.requires_grad else None]
        if weight is not None:
            grads.append(_unbroadcast(g * xhat, weight.shape) if weight.requires_grad else None)
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape) if bias.requires_grad else None)
        return tuple(grads)

    return _result(out, "layer_norm", parents, bw)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of ``[batch, classes]`` logits against integer labels."""
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy: expected [batch, classes] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, c = logits.shape
    if labels.shape[0] != b:
        raise ValueError(f"cross_entropy: {b} logits rows but {labels.shape[0]} labels")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"cross_entropy: labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    per = lse - z[np.arange(b), labels]
    k = 1.0 / b if reduction == "mean" else 1.0
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(b), labels] -= 1.0
        return (p * (g.reshape(-1)[0] * k),)

    return _result(np.array([per.sum() * k]), "cross_entropy", (logits,), bw)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _result(out, "reshape", (a,), lambda g: (g.reshape(old),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), "permute", (a,), lambda g: (g.transpose(inv),))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ValueError(f"transpose: need ndim >= 2, got {a.shape}")
    return _result(np.swapaxes(a.data, -1, -2), "transpose", (a,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, "concat", tuple(tensors), bw)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select entries along axis 0; repeated indices accumulate on backward."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise IndexError(f"gather_rows: index out of range for axis of length {a.shape[0]}")
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _result(a.data[idx], "gather_rows", (a,), bw)


def index(a: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing."""
    out = a.data[key]
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[key] = g
        return (full,)

    return _result(np.asarray(out, dtype=DTYPE).reshape(np.shape(out) or (1,)), "index", (a,), bw)


# ---------------------------------------------------------------- convolution / pooling

def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """NHWC convolution with an ``[kh, kw, c_in, c_out]`` kernel (im2col)."""
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and {weight.shape}")
    n, h, w, c = x.shape
    kh, kw, _, co = weight.shape
    xp = _pad_hw(x.data, padding)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: kernel {weight.shape[:2]} larger than padded input {xp.shape[1:3]}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # n, ho, wo, c, kh, kw
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    wmat = weight.data.reshape(kh * kw * c, co)
    out = (cols @ wmat).reshape(n, ho, wo, co)
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, co)
        gx = gw = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding:padding + h, padding:padding + w, :] if padding else gxp
        if weight.requires_grad:
            gw = (cols.T @ g2).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0).reshape(bias.shape) if bias.requires_grad else None)
        return tuple(grads)

    return _result(out, "conv2d", parents, bw)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping NHWC max pooling; ties route the gradient to the first max."""
    n, h, w, c = x.shape
    if h % size or w % size:
        raise ValueError(f"max_pool2d: spatial dims {h}x{w} not divisible by {size}")
    blocks = x.data.reshape(n, h // size, size, w // size, size, c).transpose(0, 1, 3, 5, 2, 4)
    flat = blocks.reshape(n, h // size, w // size, c, size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gb = gflat.reshape(n, h // size, w // size, c, size, size).transpose(0, 1, 4, 2, 5, 3)
        return (gb.reshape(n, h, w, c),)

    return _result(out, "max_pool2d", (x,), bw)


# ---------------------------------------------------------------- tape / backward

@dataclass
class Tape:
    """Topologically ordered op nodes reachable from an output tensor."""

    tensors: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls([t for t in order if t.node is not None])

    def __len__(self):
        return len(self.tensors)


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        raise RuntimeError("backward: tensor is detached (no recorded op)")
    tape = Tape.from_output(loss)
    cot = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.tensors):
        g = cot.pop(id(t), None)
        if g is None:
            continue
        pg = t.node.backward_fn(g)
        for p, gp in zip(t.node.parents, pg):
            if gp is None or not p.requires_grad:
                continue
            if p.node is None:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                p.grad += gp
            elif id(p) in cot:
                cot[id(p)] = cot[id(p)] + gp
            else:
                cot[id(p)] = gp


def zero_grad(tensors) -> None:
    for t in tensors:
        if t.grad is not None:
            t.grad.fill(0.0)


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Fresh gradients of ``loss`` for each tensor in ``wrt`` (zeros if unreachable)."""
    for t in wrt:
        t.grad = None
    backward(loss)
    out = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]
    for t in wrt:
        t.grad = None
    return out


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max of ``|analytic - central difference| / max(1, |analytic|)`` over entries of ``x``."""
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("grad_check: f is not finite at x")
    if out.node is None:
        analytic = np.zeros_like(leaf.data)
    else:
        analytic = grad(out, [leaf])[0]
    base = x.data.copy()
    flat = base.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base)).data
        flat[i] = orig - h
        fm = f(Tensor(base)).data
        flat[i] = orig
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise FloatingPointError(f"grad_check: f is not finite near entry {i}")
        numeric[i] = (fp.item() - fm.item()) / (2 * h)
    a = analytic.reshape(-1)
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a)))) if a.size else 0.0


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(param, dtype=DTYPE), np.zeros_like(param, dtype=DTYPE), **kw)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr) -> np.ndarray:
    """One bias-corrected Adam *descent* step; returns the updated parameter.

    ``lr`` may be a scalar or an array broadcastable against ``param``.
    Mutates ``state`` in place.
    """
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ValueError(f"adam_step: shape mismatch param {param.shape}, grad {grad.shape}, "
                         f"state {state.m.shape}")
    if np.any(np.asarray(lr) < 0):
        raise ValueError("adam_step: lr must be non-negative")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("adam_step: non-finite gradient (attack diverged)")
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grad * grad)
    mhat = state.m / (1.0 - state.beta1 ** state.t)
    vhat = state.v / (1.0 - state.beta2 ** state.t)
    return param - lr * mhat / (np.sqrt(vhat) + state.eps)
