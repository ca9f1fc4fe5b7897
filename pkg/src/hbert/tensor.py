"""Small dense tensor library with define-by-run reverse-mode autodiff.

Every forward op whose inputs require gradients appends a record to the
current thread's tape. ``backward`` walks the tape in reverse, accumulates
gradients into leaf tensors and clears the tape.

All data is float64 and row-major (numpy arrays).
"""

from __future__ import annotations

import contextlib
import struct
import threading
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "Tensor", "Tape", "ShapeMismatch", "AllMaskedRow", "IdOutOfRange", "NonScalarLoss",
    "tensor", "no_grad", "current_tape", "backward",
    "add", "sub", "mul", "neg", "scale", "matmul", "linear", "select", "reshape", "transpose", "tsum", "tmean",
    "softmax_rows", "layer_norm", "gelu", "leaky_relu", "embedding_lookup", "take_rows",
    "scatter_add_rows", "additive_scores", "segment_softmax", "dropout", "mean_pool",
    "bce_with_logits", "masked_cross_entropy",
    "tensor_to_bytes", "tensor_from_bytes",
]


class ShapeMismatch(ValueError):
    pass


class AllMaskedRow(ValueError):
    pass


class IdOutOfRange(IndexError):
    pass


class NonScalarLoss(ValueError):
    pass


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_produced", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._produced = False

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered operation records: (output, inputs, backward rule)."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.enabled = True

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad():
    tape = current_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def _result(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._produced = True
        tape.records.append((out, tuple(inputs), rule))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf tensor that ``loss`` depends on."""
    if loss.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    tape = current_tape()
    if not loss.requires_grad:
        tape.clear()
        raise ValueError("loss is not on the tape (no input requires grad)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, rule in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, rule(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._produced:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            elif inp.grad is None:
                inp.grad = np.array(gi, dtype=np.float64, copy=True)
            else:
                inp.grad = inp.grad + gi
    tape.clear()


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), rule)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x[n, k] @ W[k, m] + b[m]`` as one tape record."""
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeMismatch(f"linear {x.shape} @ {W.shape}")
    xd, wd = x.data, W.data
    y = xd @ wd
    if b is not None:
        y += b.data

    def rule(g):
        gb = g.sum(axis=0) if b is not None else None
        return (g @ wd.T, xd.T @ g) + ((gb,) if b is not None else ())

    return _result(y, (x, W) if b is None else (x, W, b), rule)


def select(a: Tensor, i: int) -> Tensor:
    """``a[i]`` along the first axis."""
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        out[i] = g
        return (out,)

    return _result(a.data[i], (a,), rule)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),))


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _result(np.asarray(a.data.sum()), (a,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))
    return _result(a.data.sum(axis=axis), (a,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# neural-network ops


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis. ``mask`` (bool, broadcastable) marks kept entries."""
    z = x.data
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not keep.any(axis=-1).all():
            raise AllMaskedRow("every entry of some row is masked")
        z = np.where(keep, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + bias.data, (x, gain, bias), rule)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * (xd + 0.044715 * x2 * xd))
    y = 0.5 * xd * (1.0 + t)

    def rule(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _result(y, (x,), rule)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    xd = x.data
    d = np.where(xd > 0, 1.0, slope)
    return _result(xd * d, (x,), lambda g: (g * d,))


def _scatter_matrix(index: np.ndarray, n: int) -> sparse.csr_matrix:
    """Sparse [n, len(index)] 0/1 matrix with S[index[e], e] = 1."""
    m = index.size
    return sparse.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n, m))


def _scatter_add(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    flat = values.reshape(values.shape[0], -1)
    return np.asarray(_scatter_matrix(index, n) @ flat).reshape((n,) + values.shape[1:])


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather ``table[ids]`` along axis 0; the gradient is scattered additively."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IdOutOfRange(f"ids must lie in [0, {n})")
    shape = table.shape

    def rule(g):
        return (_scatter_add(g.reshape((-1,) + shape[1:]), ids.reshape(-1), n),)

    return _result(table.data[ids], (table,), rule)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    return take_rows(table, ids)


def scatter_add_rows(x: Tensor, index, n: int) -> Tensor:
    """``out[index[e]] += x[e]`` for rows of ``x``; output has ``n`` rows."""
    index = np.asarray(index, dtype=np.int64)
    return _result(_scatter_add(x.data, index, n), (x,), lambda g: (g[index],))


def additive_scores(zi: Tensor, zj: Tensor, a: Tensor, slope: float = 0.2) -> Tensor:
    """``sum_d a[h, d] * leaky_relu(zi + zj)[e, h, d]`` for ``zi, zj[E, H, d]``, ``a[H, d]``."""
    u = zi.data + zj.data
    d = np.where(u > 0, 1.0, slope)
    act = u * d
    ad = a.data

    def rule(g):
        gu = g[..., None] * ad * d
        return gu, gu, np.einsum("eh,ehd->hd", g, act)

    return _result(np.einsum("ehd,hd->eh", act, ad), (zi, zj, a), rule)


def segment_softmax(scores: Tensor, segment, n_segments: int) -> Tensor:
    """Softmax of ``scores[E, ...]`` within groups of rows sharing a segment id."""
    seg = np.asarray(segment, dtype=np.int64)
    s = scores.data
    mx = np.full((n_segments,) + s.shape[1:], -np.inf)
    np.maximum.at(mx, seg, s)
    e = np.exp(s - mx[seg])
    S = _scatter_matrix(seg, n_segments)
    y = e / np.asarray(S @ e.reshape(len(seg), -1)).reshape(mx.shape)[seg]

    def rule(g):
        acc = np.asarray(S @ (g * y).reshape(len(seg), -1)).reshape(mx.shape)
        return (y * (g - acc[seg]),)

    return _result(y, (scores,), rule)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape, dtype=np.float32) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def mean_pool(x: Tensor, mask=None) -> Tensor:
    """Average over axis -2 of ``x[..., n, d]``; ``mask[..., n]`` marks rows to keep."""
    if mask is None:
        return tmean(x, axis=-2)
    w = np.asarray(mask, dtype=np.float64)
    cnt = w.sum(axis=-1, keepdims=True)
    if (cnt == 0).any():
        raise ValueError("mean_pool over zero unmasked rows")
    w = (w / cnt)[..., None]
    return _result((x.data * w).sum(axis=-2), (x,),
                   lambda g: (np.expand_dims(g, -2) * w,))


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against ``targets``."""
    z = logits.data
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != z.shape:
        raise ShapeMismatch(f"targets {y.shape} vs logits {z.shape}")
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return _result(np.asarray(loss.sum() / n), (logits,),
                   lambda g: (g * (sig - y) / n,))


def masked_cross_entropy(logits: Tensor, target_ids, loss_mask) -> Tensor:
    """Mean softmax cross-entropy over positions where ``loss_mask`` is true.

    ``logits`` is ``[..., V]``; zero selected positions yield 0 with zero gradient.
    """
    z = logits.data
    t = np.asarray(target_ids, dtype=np.int64)
    m = np.asarray(loss_mask, dtype=bool)
    n = int(m.sum())
    if n == 0:
        return _result(np.asarray(0.0), (logits,), lambda g: (np.zeros_like(z),))
    mx = z.max(axis=-1, keepdims=True)
    e = np.exp(z - mx)
    tot = e.sum(axis=-1, keepdims=True)
    lse = (mx + np.log(tot))[..., 0]
    picked = np.take_along_axis(z, t[..., None], axis=-1)[..., 0]
    loss = ((lse - picked) * m).sum() / n

    def rule(g):
        p = e / tot
        np.put_along_axis(p, t[..., None], np.take_along_axis(p, t[..., None], axis=-1) - 1.0, axis=-1)
        return (g * p * (m[..., None] / n),)

    return _result(np.asarray(loss), (logits,), rule)


# ---------------------------------------------------------------------------
# serialization: b"HBT1" | uint32 ndim | uint64 dims... | float64 LE data

_MAGIC = b"HBT1"


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    head = _MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(buf: bytes, requires_grad: bool = False) -> Tensor:
    if buf[:4] != _MAGIC:
        raise ValueError("not a serialized tensor")
    (ndim,) = struct.unpack_from("<I", buf, 4)
    shape = struct.unpack_from(f"<{ndim}Q", buf, 8)
    off = 8 + 8 * ndim
    n = int(np.prod(shape)) if ndim else 1
    if len(buf) != off + 8 * n:
        raise ValueError("tensor payload length does not match its shape header")
    data = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape)
    return Tensor(data.astype(np.float64), requires_grad=requires_grad)
