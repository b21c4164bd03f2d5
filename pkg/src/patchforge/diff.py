"""A small reverse-mode autodiff engine over dense numpy arrays.

Only the operations the completion networks need are provided. Every op records
its parents and a closure that maps the output gradient to parent gradients;
:func:`backward` walks the graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import struct
from pathlib import Path

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        super().__init__(f"non-finite values in {op}" + (f": {detail}" if detail else ""))


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None, _check=True):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        if _check and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor", "leaf values must be finite")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self.backward_fn = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other, self.dtype), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data, op, parents, backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    out = Tensor(data, _check=False)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), bw)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)

        def bw_const(g):
            return (_unbroadcast(g * c, a.shape),)

        return _make(a.data * c, "mul", (a,), bw_const)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, "mul", (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        return (g * (1 - y * y),)

    return _make(y, "tanh", (x,), bw)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def bw(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(np.asarray(x.data.sum(), dtype=x.dtype), "sum", (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    y = x.data.mean(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _make(np.asarray(y, dtype=x.dtype), "mean", (x,), bw)


# shape ------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    y = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _make(y, "reshape", (x,), bw)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), "transpose", (x,), bw)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    y = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(y, "concat", tuple(tensors), bw)


# linear algebra -----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    y = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(y, "matmul", (a, b), bw)


def softmax(x: Tensor, axis=-1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, "softmax", (x,), bw)


# normalization -----------------------------------------------------------------

def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    B, C = x.shape[:2]
    if C % groups:
        raise ValueError(f"{C} channels not divisible into {groups} groups")
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    bshape = (1, C) + (1,) * (x.ndim - 2)
    y = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        gx_hat = (g * gamma.data.reshape(bshape)).reshape(B, groups, -1)
        xh = xhat.reshape(B, groups, -1)
        gx = inv * (gx_hat - gx_hat.mean(axis=2, keepdims=True) - xh * (gx_hat * xh).mean(axis=2, keepdims=True))
        return gx.reshape(x.shape), (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(y.astype(x.dtype), "group_norm", (x, gamma, beta), bw)


# loss ---------------------------------------------------------------------------

def l1_masked(pred: Tensor, target, mask) -> Tensor:
    """Mean of |pred - target| over entries where ``mask`` is true; 0 for an empty mask."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    mask = np.asarray(mask, dtype=bool)
    if target.shape != pred.shape or mask.shape != pred.shape:
        raise ValueError(f"l1_masked shape mismatch {pred.shape}, {target.shape}, {mask.shape}")
    n = int(mask.sum())
    diff = pred.data - target
    if n == 0:
        val = np.zeros((), dtype=pred.dtype)
    else:
        val = np.asarray(np.abs(diff[mask]).sum() / n, dtype=pred.dtype)

    def bw(g):
        if n == 0:
            return (np.zeros_like(pred.data),)
        return ((g / n) * np.sign(diff) * mask,)

    return _make(val, "l1_masked", (pred,), bw)


# convolution --------------------------------------------------------------------

def _triple(v):
    return (v, v, v) if np.isscalar(v) else tuple(v)


def _offsets(k):
    return [(i, j, l) for i in range(k[0]) for j in range(k[1]) for l in range(k[2])]


def _window(arr, off, s, out_sp):
    i, j, l = off
    return arr[:, :,
               i:i + s[0] * (out_sp[0] - 1) + 1:s[0],
               j:j + s[1] * (out_sp[1] - 1) + 1:s[1],
               l:l + s[2] * (out_sp[2] - 1) + 1:s[2]]


def _corr(xp, w, s, out_sp):
    """y[b,o,p] = sum_{c,off} xp[b,c,s*p+off] * w[o,c,off]."""
    B = xp.shape[0]
    acc = np.zeros((B,) + tuple(out_sp) + (w.shape[0],), dtype=np.result_type(xp, w))
    for off in _offsets(w.shape[2:]):
        acc += np.tensordot(_window(xp, off, s, out_sp), w[:, :, off[0], off[1], off[2]], axes=([1], [1]))
    return np.moveaxis(acc, -1, 1)


def _corr_adj(y, w, s, in_sp):
    """Adjoint of :func:`_corr` with respect to its input (scatter-add)."""
    B = y.shape[0]
    out = np.zeros((B, w.shape[1]) + tuple(in_sp), dtype=np.result_type(y, w))
    out_sp = y.shape[2:]
    yt = np.moveaxis(y, 1, -1)
    for off in _offsets(w.shape[2:]):
        contrib = np.tensordot(yt, w[:, :, off[0], off[1], off[2]], axes=([4], [0]))
        _window(out, off, s, out_sp)[...] += np.moveaxis(contrib, -1, 1)
    return out


def _corr_wgrad(xp, y, s, k):
    gw = np.zeros((y.shape[1], xp.shape[1]) + tuple(k), dtype=np.result_type(xp, y))
    out_sp = y.shape[2:]
    for off in _offsets(k):
        gw[:, :, off[0], off[1], off[2]] = np.tensordot(y, _window(xp, off, s, out_sp), axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return gw


def _pad(x, p):
    if not any(p):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((q, q) for q in p))


def _crop(x, p):
    if not any(p):
        return x
    return x[:, :, p[0]:x.shape[2] - p[0], p[1]:x.shape[3] - p[1], p[2]:x.shape[4] - p[2]]


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation. x: (B, C, D, H, W); w: (O, C, k, k, k); b: (O,)."""
    s, p = _triple(stride), _triple(padding)
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv3d shape mismatch {x.shape} * {w.shape}")
    k = w.shape[2:]
    out_sp = tuple((x.shape[2 + a] + 2 * p[a] - k[a]) // s[a] + 1 for a in range(3))
    if min(out_sp) < 1:
        raise ValueError(f"conv3d output would be empty for input {x.shape}")
    xp = _pad(x.data, p)
    y = _corr(xp, w.data, s, out_sp)
    if b is not None:
        y = y + b.data.reshape(1, -1, 1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = _crop(_corr_adj(g, w.data, s, xp.shape[2:]), p)
        gw = _corr_wgrad(xp, g, s, k)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return _make(y.astype(x.dtype, copy=False), "conv3d", parents, bw)


def conv3d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Transposed convolution (adjoint of :func:`conv3d`). x: (B, I, ...); w: (I, O, k, k, k)."""
    s, p = _triple(stride), _triple(padding)
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[0]:
        raise ValueError(f"conv3d_transpose shape mismatch {x.shape} * {w.shape}")
    k = w.shape[2:]
    full = tuple((x.shape[2 + a] - 1) * s[a] + k[a] for a in range(3))
    if any(full[a] - 2 * p[a] < 1 for a in range(3)):
        raise ValueError("conv3d_transpose output would be empty")
    y = _crop(_corr_adj(x.data, w.data, s, full), p)
    if b is not None:
        y = y + b.data.reshape(1, -1, 1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gp = _pad(g, p)
        gx = _corr(gp, w.data, s, x.shape[2:])
        gw = _corr_wgrad(gp, x.data, s, k)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return _make(np.ascontiguousarray(y).astype(x.dtype, copy=False), "conv3d_transpose", parents, bw)


# backward -----------------------------------------------------------------------

def _topo(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad=None) -> list[Tensor]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf; returns those leaves."""
    if not loss.requires_grad:
        return []
    if grad is None:
        if loss.data.size != 1:
            raise ValueError("backward without an explicit gradient needs a scalar loss")
        grad = np.ones_like(loss.data)
    grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    leaves = []
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves.append(node)
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ValueError(f"{node.op} backward produced shape {pg.shape} for {parent.shape}")
            if not np.all(np.isfinite(pg)):
                raise NonFiniteError(node.op + " (backward)")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return leaves


# checkpoints --------------------------------------------------------------------

def save_tensors(path, tensors: dict) -> None:
    """Flat little-endian checkpoint: u32 count, then per tensor u32 name length, name, u32 rank, u32 dims, f32 data."""
    parts = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name]
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_tensors(path) -> dict:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError(f"checkpoint {path} is truncated")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise ValueError(f"checkpoint {path} has trailing bytes")
    return out


# gradient checking ------------------------------------------------------------------

def numeric_grad(fn, tensors, eps: float = 1e-3, max_entries: int | None = None, seed: int = 0):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensors``.

    Returns a list of (flat_indices, derivatives) per tensor. With ``max_entries`` only a
    seeded random subset of each tensor's entries is probed.
    """
    rng = np.random.default_rng(seed)
    out = []
    with no_grad():
        for t in tensors:
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            vals = np.empty(len(idx))
            for n, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(fn().data)
                flat[i] = orig - eps
                down = float(fn().data)
                flat[i] = orig
                vals[n] = (up - down) / (2 * eps)
            out.append((idx, vals))
    return out


def gradcheck(fn, tensors, eps: float = 1e-3, max_entries: int | None = None, seed: int = 0) -> float:
    """Norm-wise relative error ``|g_a - g_n| / max(|g_a|, |g_n|)`` between reverse-mode and
    central-difference gradients of scalar ``fn()``, over all probed entries of ``tensors``.

    Pooling the entries keeps parameters whose true gradient is zero (biases in front of a
    normalization, say) from turning round-off noise into a unit relative error.
    """
    for t in tensors:
        t.grad = None
    backward(fn())
    ana, num = [], []
    for t, (idx, vals) in zip(tensors, numeric_grad(fn, tensors, eps, max_entries, seed)):
        g = np.zeros(t.data.size) if t.grad is None else t.grad.reshape(-1).astype(np.float64)
        ana.append(g[idx])
        num.append(vals)
    ana, num = np.concatenate(ana), np.concatenate(num)
    scale = max(np.linalg.norm(ana), np.linalg.norm(num))
    return 0.0 if scale == 0 else float(np.linalg.norm(ana - num) / scale)
