"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small engine: numpy arrays as storage, float32/float64 only,
row-major layout, no strided views (every slice copies). Each operation that
participates in differentiation records its parents and a backward closure;
``backward`` on a scalar loss replays the closures in reverse topological
order. Gradients accumulate across calls -- callers zero them between steps.
"""

from __future__ import annotations

import math
from itertools import zip_longest

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Raised when operand shapes cannot be combined."""


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class RngState:
    """Counter-based random stream: (seed, position) fully determines the next draw.

    Every draw keys a fresh Philox generator with (seed, position) and then
    advances position by one, so streams can be saved, restored, and replayed
    exactly by recording two integers.
    """

    def __init__(self, seed: int, position: int = 0):
        self.seed = int(seed) & _MASK64
        self.position = int(position) & _MASK64

    def _generator(self) -> np.random.Generator:
        g = np.random.Generator(np.random.Philox(key=[self.seed, self.position]))
        self.position = (self.position + 1) & _MASK64
        return g

    def uniform(self, shape) -> np.ndarray:
        return self._generator().random(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def split(self, tag: int) -> "RngState":
        """Derive an independent stream; identical (seed, tag) gives an identical stream."""
        return RngState(_splitmix64(self.seed ^ _splitmix64(tag)), 0)

    def state(self) -> dict:
        return {"seed": self.seed, "position": self.position}

    @classmethod
    def from_state(cls, state: dict) -> "RngState":
        return cls(state["seed"], state["position"])

    def __repr__(self):
        return f"RngState(seed={self.seed}, position={self.position})"


def _broadcast_shape(sa: tuple, sb: tuple) -> tuple:
    out = []
    for da, db in zip_longest(reversed(sa), reversed(sb), fillvalue=1):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"cannot broadcast shapes {tuple(sa)} and {tuple(sb)}")
        out.append(max(da, db))
    return tuple(reversed(out))


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


class Tensor:
    """N-dimensional numeric array, optionally tracked by the autograd tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, dtype: str | None = None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw data, not another Tensor")
        np_dtype = DTYPES[dtype] if dtype is not None else None
        arr = np.asarray(data, dtype=np_dtype)
        if arr.dtype not in _DTYPE_NAMES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        out._op = op
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; the functional API below is the primary surface
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_dtypes(a: Tensor, b: Tensor, op: str):
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.dtype} and {b.dtype}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b) -> Tensor:
    a0 = a
    b = _as_tensor(b, a0)
    _check_dtypes(a0, b, "add")
    _broadcast_shape(a0.shape, b.shape)
    out_data = a0.data + b.data

    def backward(out):
        g = out.grad
        if a0.requires_grad:
            a0._accum(_reduce_to(g, a0.shape))
        if b.requires_grad:
            b._accum(_reduce_to(g, b.shape))

    return Tensor._from_op(out_data, (a0, b), backward, "add")


def mul(a: Tensor, b) -> Tensor:
    a0 = a
    b = _as_tensor(b, a0)
    _check_dtypes(a0, b, "mul")
    _broadcast_shape(a0.shape, b.shape)
    out_data = a0.data * b.data

    def backward(out):
        g = out.grad
        if a0.requires_grad:
            a0._accum(_reduce_to(g * b.data, a0.shape))
        if b.requires_grad:
            b._accum(_reduce_to(g * a0.data, b.shape))

    return Tensor._from_op(out_data, (a0, b), backward, "mul")


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """Dispatch broadcasting elementwise arithmetic; op is "add" or "mul"."""
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# contraction


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} by {b.shape}"
        )
    _broadcast_shape(a.shape[:-2], b.shape[:-2])
    out_data = a.data @ b.data

    def backward(out):
        g = out.grad
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum(_reduce_to(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(_reduce_to(gb, b.shape))

    return Tensor._from_op(out_data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# shape plumbing (copies, never views)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = a.data.reshape(shape).copy()

    def backward(out):
        if a.requires_grad:
            a._accum(out.grad.reshape(a.shape))

    return Tensor._from_op(out_data, (a,), backward, "reshape")


def transpose(a: Tensor, axis0: int, axis1: int) -> Tensor:
    out_data = np.swapaxes(a.data, axis0, axis1).copy()

    def backward(out):
        if a.requires_grad:
            a._accum(np.swapaxes(out.grad, axis0, axis1))

    return Tensor._from_op(out_data, (a,), backward, "transpose")


def slice_rows(a: Tensor, n: int) -> Tensor:
    """First n rows along axis 0, as a copy; backward scatters into the source."""
    if not 0 < n <= a.shape[0]:
        raise ShapeError(f"cannot take {n} rows from shape {a.shape}")
    out_data = a.data[:n].copy()

    def backward(out):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[:n] = out.grad
            a._accum(g)

    return Tensor._from_op(out_data, (a,), backward, "slice_rows")


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out_data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(out):
        if a.requires_grad:
            a._accum(np.broadcast_to(out.grad, a.shape).astype(a.data.dtype))

    return Tensor._from_op(out_data, (a,), backward, "sum")


def masked_fill(a: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``keep`` is False by ``value``; gradient flows only where kept."""
    keep_b = np.broadcast_to(keep, a.shape)
    out_data = np.where(keep_b, a.data, a.data.dtype.type(value))

    def backward(out):
        if a.requires_grad:
            a._accum(np.where(keep_b, out.grad, 0.0))

    return Tensor._from_op(out_data, (a,), backward, "masked_fill")


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax_last(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max-subtraction.

    -inf entries (mask sentinels) get probability exactly 0. A slice that is
    entirely -inf has no well-defined distribution and raises.
    """
    x = a.data
    if x.shape[-1] < 1:
        raise ShapeError("softmax_last needs a non-empty last axis")
    m = np.max(x, axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise ValueError("softmax_last: degenerate slice, all entries are -inf")
    e = np.exp(x - m)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(out):
        if a.requires_grad:
            g = out.grad
            p = out.data
            dot = (g * p).sum(axis=-1, keepdims=True)
            a._accum(p * (g - dot))

    return Tensor._from_op(out_data, (a,), backward, "softmax_last")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis slice to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last extent {d}"
        )
    _check_dtypes(a, gamma, "layer_norm")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gamma.data * xhat + beta.data

    def backward(out):
        g = out.grad
        if gamma.requires_grad:
            gamma._accum((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accum(g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            dxhat = g * gamma.data
            s1 = dxhat.sum(axis=-1, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
            a._accum(inv / d * (d * dxhat - s1 - xhat * s2))

    return Tensor._from_op(out_data, (a, gamma, beta), backward, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU, elementwise."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(out):
        if a.requires_grad:
            sech2 = 1.0 - t * t
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
            a._accum(out.grad * (0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner))

    return Tensor._from_op(out_data, (a,), backward, "gelu")


# ---------------------------------------------------------------------------
# token <-> vector plumbing


def embed_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer id; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        bad = int(ids.min()) if ids.min() < 0 else int(ids.max())
        raise IndexError(f"embed_lookup: id {bad} outside table of {v} rows")
    out_data = table.data[ids]

    def backward(out):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids.reshape(-1), out.grad.reshape(-1, table.shape[-1]))

    return Tensor._from_op(out_data, (table,), backward, "embed_lookup")


def dropout(a: Tensor, rate: float, mode: str, rng: RngState | None = None) -> Tensor:
    """Inverted dropout: train mode zeroes with probability ``rate`` and rescales
    survivors by 1/(1-rate); eval mode is the identity."""
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout: mode must be 'train' or 'eval', got {mode!r}")
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout: train mode needs an RngState")
    keep = rng.uniform(a.shape) >= rate
    scale = a.data.dtype.type(1.0 / (1.0 - rate))
    factor = keep.astype(a.data.dtype) * scale
    out_data = a.data * factor

    def backward(out):
        if a.requires_grad:
            a._accum(out.grad * factor)

    return Tensor._from_op(out_data, (a,), backward, "dropout")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under last-axis softmax of ``logits``."""
    targets = np.asarray(targets)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(
            f"cross_entropy: target shape {targets.shape} does not match logits {logits.shape}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        bad = int(targets.min()) if targets.min() < 0 else int(targets.max())
        raise IndexError(f"cross_entropy: target id {bad} outside vocabulary of {v}")
    x = logits.data
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = (x - m) - np.log(z)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    n = targets.size
    out_data = np.asarray(-picked.sum() / n, dtype=x.dtype)

    def backward(out):
        if logits.requires_grad:
            p = e / z
            onehot_sub = p.copy()
            np.subtract.at(
                onehot_sub.reshape(-1, v),
                (np.arange(n), targets.reshape(-1)),
                1.0,
            )
            logits._accum(out.grad * onehot_sub / n)

    return Tensor._from_op(out_data, (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# reverse-mode traversal


def backward(loss: Tensor):
    """Populate .grad on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate; the caller zeroes them between steps.
    """
    if loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    loss._accum(np.ones((), dtype=loss.data.dtype))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node)
