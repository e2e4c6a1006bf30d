"""Dense float64 tensors with reverse-mode autodiff.

Every op returns a new :class:`Tensor`. When any input requires grad, the
result keeps references to its parents plus a closure mapping the upstream
gradient to per-parent gradients. :func:`backward` walks that graph in
reverse topological order. There is no global tape, so independent runs can
proceed in parallel threads.
"""
from __future__ import annotations

import hashlib
import math
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, FormatError, InputError

MASK_VALUE = -1e9


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward_fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from None
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from None
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    return _make(y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    n = xd.shape[-1]

    def backward(g):
        ggain = _unbroadcast(g * xhat, gd.shape)
        gbias = _unbroadcast(g, bias.shape)
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, ggain, gbias

    return _make(xhat * gd + bias.data, (x, gain, bias), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` (first axis) at integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise InputError(f"embedding index out of range [0, {n}): {ids.min()}..{ids.max()}")
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(table.data[ids], (table,), backward)


def causal_mask_add(scores: Tensor) -> Tensor:
    """Add a large negative constant above the diagonal of the last two axes."""
    t_q, t_k = scores.shape[-2:]
    mask = np.triu(np.full((t_q, t_k), MASK_VALUE), k=1)
    return _make(scores.data + mask, (scores,), lambda g: (g,))


def cross_entropy(logits: Tensor, targets, smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed cross-entropy over positions with ``target >= 0``.

    Per position: ``(1-s) * NLL(target) + s * mean_v NLL(v)``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    x = logits.data
    vocab = x.shape[-1]
    if targets.shape != x.shape[:-1]:
        raise DimensionError(f"targets shape {targets.shape} does not match logits {x.shape}")
    if targets.size and targets.max() >= vocab:
        raise InputError(f"target id {targets.max()} >= vocab size {vocab}")
    if not 0.0 <= smoothing < 1.0:
        raise ContractError(f"label smoothing must lie in [0, 1), got {smoothing}")
    valid = targets >= 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ContractError("cross_entropy needs at least one non-ignored target")
    flat = x.reshape(-1, vocab)
    tflat = targets.reshape(-1)
    vflat = valid.reshape(-1)
    m = flat.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(flat - m).sum(axis=-1, keepdims=True)))[:, 0]
    picked = flat[np.arange(len(tflat)), np.where(vflat, tflat, 0)]
    per = (1.0 - smoothing) * (lse - picked) + smoothing * (lse - flat.mean(axis=-1))
    loss = float(per[vflat].sum() / n_valid)

    def backward(g):
        p = np.exp(flat - lse[:, None])
        grad = p - smoothing / vocab
        rows = np.nonzero(vflat)[0]
        grad[rows, tflat[rows]] -= 1.0 - smoothing
        grad[~vflat] = 0.0
        return ((g / n_valid) * grad.reshape(x.shape),)

    return _make(np.array(loss), (logits,), backward)


# ------------------------------------------------------------------ backward

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Gradients accumulate across calls until :func:`zero_grad`.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_or_zeros(t: Tensor) -> np.ndarray:
    return t.grad if t.grad is not None else np.zeros(t.shape)


# ------------------------------------------------------------------ checking

def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x.data`` is perturbed in place and restored, so ``f`` may close over the
    very tensor being checked.
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = _scalar(f(x))
        flat[i] = orig - eps
        fm = _scalar(f(x))
        flat[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(x.shape)


def _scalar(v) -> float:
    return float(v.data) if isinstance(v, Tensor) else float(v)


def rel_err(a, b, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a-b| / max(|a|, |b|)``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


# ---------------------------------------------------------------------- rng

class Rng:
    """Seeded counter-based generator (Philox).

    ``child(name)`` derives an independent stream from ``(seed, name)`` only,
    so streams do not depend on the order in which other streams were used.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2 ** 64:
            raise ContractError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def child(self, name: str) -> "Rng":
        digest = hashlib.sha256(f"{self.seed}/{name}".encode()).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def gaussian(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if std < 0:
            raise ContractError(f"std must be non-negative, got {std}")
        return mean + std * self._gen.standard_normal(shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, high: int, size=None) -> np.ndarray | int:
        return self._gen.integers(0, high, size=size)

    def choice(self, n: int, size, p=None) -> np.ndarray:
        return self._gen.choice(n, size=size, p=p)


def rng_gaussian(rng: Rng, shape, mean: float = 0.0, std: float = 1.0, requires_grad: bool = False) -> Tensor:
    return Tensor(rng.gaussian(shape, mean, std), requires_grad=requires_grad)


# ------------------------------------------------------------- serialization

ZTSR_MAGIC = b"ZTSR"
_BITS_TO_FLAG = {32: 0, 64: 1}
_FLAG_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode_tensor(values, bits: int = 64) -> bytes:
    """ZTSR block: magic, u32 rank, u32 dims, u8 payload flag (0=f32, 1=f64), values."""
    if bits not in _BITS_TO_FLAG:
        raise ContractError(f"bits must be 32 or 64, got {bits}")
    arr = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
    if 0 in arr.shape:
        raise FormatError(f"cannot serialize a tensor with a zero dimension: {arr.shape}")
    flag = _BITS_TO_FLAG[bits]
    head = ZTSR_MAGIC + struct.pack(f"<I{arr.ndim}IB", arr.ndim, *arr.shape, flag)
    return head + np.ascontiguousarray(arr, dtype=_FLAG_TO_DTYPE[flag]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0, where: str = "tensor") -> tuple[np.ndarray, int, int]:
    """Parse one ZTSR block; returns ``(float64 array, bits, end offset)``."""
    mv = memoryview(buf)
    if bytes(mv[offset:offset + 4]) != ZTSR_MAGIC:
        raise FormatError(f"{where}: bad magic at byte {offset}")
    try:
        (rank,) = struct.unpack_from("<I", mv, offset + 4)
        if rank > 32:
            raise FormatError(f"{where}: implausible rank {rank}")
        dims = struct.unpack_from(f"<{rank}I", mv, offset + 8)
        (flag,) = struct.unpack_from("<B", mv, offset + 8 + 4 * rank)
    except struct.error:
        raise FormatError(f"{where}: truncated header at byte {offset}") from None
    if any(d == 0 for d in dims):
        raise FormatError(f"{where}: zero dimension in shape {dims}")
    if flag not in _FLAG_TO_DTYPE:
        raise FormatError(f"{where}: unknown payload flag {flag}")
    dtype = _FLAG_TO_DTYPE[flag]
    start = offset + 9 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    end = start + count * dtype.itemsize
    if end > len(mv):
        raise FormatError(f"{where}: payload truncated (need {end} bytes, have {len(mv)})")
    arr = np.frombuffer(mv[start:end], dtype=dtype).astype(np.float64).reshape(dims)
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        raise FormatError(f"{where}: non-finite value at flat index {int(bad[0])}")
    return arr, 32 if flag == 0 else 64, end


def save_tensor(path, values, bits: int = 64) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(values, bits))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, _, end = decode_tensor(buf, where=str(path))
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes")
    return arr
