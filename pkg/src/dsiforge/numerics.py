"""Tiny define-by-run reverse-mode autodiff over float64 numpy arrays.

Only the handful of ops the indexer and the query generator need are
provided. Every op checks its output for NaN/Inf and raises instead of
propagating garbage.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference, evaluation, finite differences)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "parents", "backward", "requires_grad", "name")

    def __init__(self, data, parents: tuple = (), backward: Callable | None = None,
                 requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.parents = parents
        self.backward = backward
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # sugar used by tests and small losses
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, op: str, parents: tuple, backward: Callable) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(out)
    return Tensor(out, parents, backward, requires_grad=True, name=None)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not conformable") from None


# ----------------------------------------------------------------------------
# ops
# ----------------------------------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting (covers add-bias)."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    ad, bd = a.data, b.data
    return _make(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _make(a.data.T, "transpose", (a,), lambda g: (g.T,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def total(a) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    a = as_tensor(a)
    shape = a.shape
    return _make(np.asarray(a.data.sum()), "sum", (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def gather(table, idx) -> Tensor:
    """Rows ``table[idx]``; gradient is scatter-added back into the table."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"gather: table must be 2-d, got shape {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather: index out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def back(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _make(table.data[idx], "gather", (table,), back)


def segment_mean(x, segments, n_segments: int) -> Tensor:
    """Mean of the rows of ``x`` grouped by ``segments``; empty groups give zeros."""
    x = as_tensor(x)
    seg = np.asarray(segments, dtype=np.int64)
    if x.data.ndim != 2 or seg.shape != (x.shape[0],):
        raise ShapeError(f"segment_mean: shapes {x.shape} and {seg.shape} are not conformable")
    counts = np.bincount(seg, minlength=n_segments).astype(DTYPE)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    out = np.zeros((n_segments, x.shape[1]), dtype=DTYPE)
    np.add.at(out, seg, x.data)
    out *= inv[:, None]
    w = inv[seg][:, None]
    return _make(out, "segment_mean", (x,), lambda g: (g[seg] * w,))


def mean_pool(x) -> Tensor:
    """Mean over the sequence (row) axis of an (L, d) tensor."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise ShapeError(f"mean_pool: expected non-empty (L, d), got shape {x.shape}")
    n = x.shape[0]
    return _make(x.data.mean(axis=0), "mean_pool", (x,),
                 lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def softmax(a) -> Tensor:
    a = as_tensor(a)
    s = _softmax_np(a.data)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, "softmax", (a,), back)


def softmax_xent(logits, target, reduction: str = "mean") -> Tensor:
    """Cross-entropy ``-log softmax(logits)[target]``.

    ``logits`` is (K,) with an int target, or (B, K) with B targets; batched
    losses are averaged (``reduction="mean"``) or summed.
    """
    logits = as_tensor(logits)
    z = logits.data
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if z2.ndim != 2 or t.shape != (z2.shape[0],):
        raise ShapeError(f"softmax_xent: shapes {logits.shape} and {t.shape} are not conformable")
    k = z2.shape[1]
    if t.size and (t.min() < 0 or t.max() >= k):
        raise IndexError(f"softmax_xent: target out of range for {k} classes")
    rows = np.arange(z2.shape[0])
    logp = _log_softmax_np(z2)
    losses = -logp[rows, t]
    denom = z2.shape[0] if reduction == "mean" else 1
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    def back(g):
        d = np.exp(logp)
        d[rows, t] -= 1.0
        d *= g / denom
        return (d[0] if single else d,)

    return _make(np.asarray(losses.sum() / denom), "softmax_xent", (logits,), back)


def mixture_logprobs(components, gate) -> np.ndarray:
    """Row-wise log of sum_k softmax(gate)_k * softmax(components[k]); no tape."""
    lw = _log_softmax_np(np.asarray(gate, dtype=DTYPE))
    parts = np.stack([_log_softmax_np(np.asarray(c, dtype=DTYPE)) + lw[:, k:k + 1]
                      for k, c in enumerate(components)])
    m = parts.max(axis=0)
    return m + np.log(np.exp(parts - m).sum(axis=0))


def mixture_xent(components: Sequence, gate, target, reduction: str = "mean") -> Tensor:
    """Cross-entropy of a gated mixture of softmax distributions.

    ``components`` are (B, K) logit tensors, ``gate`` is (B, C) with one
    column per component; the loss is ``-log sum_k w_k q_k[target]``.
    """
    comps = [as_tensor(c) for c in components]
    gate = as_tensor(gate)
    B = gate.shape[0]
    if gate.data.ndim != 2 or gate.shape[1] != len(comps):
        raise ShapeError(f"mixture_xent: gate shape {gate.shape} does not match {len(comps)} components")
    for c in comps:
        if c.shape != comps[0].shape or c.shape[0] != B:
            raise ShapeError(f"mixture_xent: component shapes {c.shape} and {comps[0].shape} differ")
    t = np.asarray(target, dtype=np.int64)
    K = comps[0].shape[1]
    if t.shape != (B,):
        raise ShapeError(f"mixture_xent: shapes {gate.shape} and {t.shape} are not conformable")
    if t.size and (t.min() < 0 or t.max() >= K):
        raise IndexError(f"mixture_xent: target out of range for {K} classes")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    rows = np.arange(B)
    logq = [_log_softmax_np(c.data) for c in comps]
    lw = _log_softmax_np(gate.data)
    a = np.stack([lq[rows, t] for lq in logq], axis=1) + lw
    m = a.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]
    resp = np.exp(a - lse[:, None])
    denom = B if reduction == "mean" else 1

    def back(g):
        s = g / denom
        outs = []
        for k, lq in enumerate(logq):
            d = np.exp(lq)
            d[rows, t] -= 1.0
            outs.append(d * (resp[:, k:k + 1] * s))
        outs.append((np.exp(lw) - resp) * s)
        return tuple(outs)

    return _make(np.asarray(-lse.sum() / denom), "mixture_xent", (*comps, gate), back)


# ----------------------------------------------------------------------------
# backward
# ----------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
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


def grad(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to each tracked parameter.

    Parameters the loss does not depend on get a zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"grad: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("grad: loss is not on the tape (no tracked parameter reaches it)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward is None:
            leaf_grads[id(node)] = g
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = {}
    for name, p in params.items():
        g = leaf_grads.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else g.reshape(p.shape)
    return out


# ----------------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------------

class ParamSet:
    """Ordered, uniquely named parameter arrays."""

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        for k, v in (arrays or {}).items():
            self.add(k, v)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._arrays:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._arrays[name] = np.asarray(value, dtype=DTYPE)

    def replace(self, name: str, value: np.ndarray) -> None:
        if name not in self._arrays:
            raise KeyError(name)
        self._arrays[name] = np.asarray(value, dtype=DTYPE)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def names(self) -> list[str]:
        return list(self._arrays)

    @property
    def count(self) -> int:
        return int(sum(a.size for a in self._arrays.values()))

    def track(self) -> dict[str, Tensor]:
        """Fresh leaf tensors sharing storage with the parameter arrays."""
        return {k: Tensor(v, requires_grad=_grad_enabled, name=k) for k, v in self._arrays.items()}

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._arrays.items()})

    def assign(self, other: "ParamSet") -> None:
        """Overwrite values in place from ``other`` (same names and shapes)."""
        for k, v in other.items():
            self._arrays[k][...] = v

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._arrays.values()]) if self._arrays else np.zeros(0)


def seeded_init(shape: Sequence[int], scale: float, seed: int) -> np.ndarray:
    """Zero-mean normal values with std ``scale``, fixed by ``seed``."""
    if scale < 0:
        raise ValueError("scale must be non-negative")
    if scale == 0:
        return np.zeros(tuple(shape), dtype=DTYPE)
    return np.random.default_rng(seed).normal(0.0, scale, size=tuple(shape)).astype(DTYPE)
