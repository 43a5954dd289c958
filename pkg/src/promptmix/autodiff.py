"""Reverse-mode differentiation over a small, fixed set of dense float64 ops.

The computation graphs in this package are closed and known ahead of time
(context assembly, pooling encoders, cosine scoring, gating, the three loss
terms), so this is not a general autodiff engine: only the primitives those
graphs need are implemented. Every op validates its inputs, computes the
forward value eagerly as a float64 ndarray, and records a backward closure.
``backward(loss)`` replays the recorded graph in reverse topological order,
accumulating gradients additively into every node with ``requires_grad``.

Frozen inputs (``requires_grad=False``) never receive gradients and ops whose
inputs are all frozen record nothing, so constant-only computations run at
plain numpy cost.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import (
    DegenerateVectorError,
    DistributionError,
    HyperparameterError,
    InvalidInputError,
    ShapeError,
)

_NORM_EPS = 1e-12
_DIST_ATOL = 1e-9


class Tensor:
    """A 0-, 1- or 2-dimensional float64 array tracked for reverse mode.

    ``data`` is immutable by convention while a graph that references the
    tensor is alive; optimizers mutate parameter ``data`` in place only
    between forward/backward passes.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_children", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str = "",
        _children: tuple["Tensor", ...] = (),
        _backward: Callable[[], None] | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"tensors are at most 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError(f"non-finite entries in tensor {name or arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._children = _children
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str = "") -> Tensor:
    """A trainable leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data, name: str = "") -> Tensor:
    """A frozen leaf; never receives gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=False, name=name)


def _node(data, children: tuple[Tensor, ...], backward: Callable[[], None]) -> Tensor:
    if any(c.requires_grad for c in children):
        return Tensor(data, requires_grad=True, _children=children, _backward=backward)
    return Tensor(data)


def backward(loss: Tensor) -> None:
    """Reverse-mode pass from a recorded scalar; grads accumulate additively."""
    if loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    topo: list[Tensor] = []
    visited: set[int] = set()

    def visit(t: Tensor) -> None:
        if id(t) not in visited:
            visited.add(id(t))
            for child in t._children:
                if child.requires_grad:
                    visit(child)
            topo.append(t)

    visit(loss)
    loss.accumulate_grad(np.ones_like(loss.data))
    for t in reversed(topo):
        if t._backward is not None:
            t._backward()


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: {a.data.shape} vs {b.data.shape}")
    out_data = a.data + b.data

    def _bw():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    out = _node(out_data, (a, b), _bw)
    return out


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out_data = a.data * c

    def _bw():
        if a.requires_grad:
            a.accumulate_grad(out.grad * c)

    out = _node(out_data, (a,), _bw)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim == 0 or b.data.ndim == 0:
        raise ShapeError("matmul does not take scalars")
    if a.data.ndim == 1 and b.data.ndim == 1:
        raise ShapeError("matmul does not take two vectors; use dot_rows or cosine")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def _bw():
        g = out.grad
        if a.data.ndim == 1:  # (k,) @ (k,n) -> (n,)
            if a.requires_grad:
                a.accumulate_grad(b.data @ g)
            if b.requires_grad:
                b.accumulate_grad(np.outer(a.data, g))
        elif b.data.ndim == 1:  # (m,k) @ (k,) -> (m,)
            if a.requires_grad:
                a.accumulate_grad(np.outer(g, b.data))
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ g)
        else:
            if a.requires_grad:
                a.accumulate_grad(g @ b.data.T)
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ g)

    out = _node(out_data, (a, b), _bw)
    return out


def sum_entries(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sum(a.data)

    def _bw():
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(out.grad)))

    out = _node(out_data, (a,), _bw)
    return out


def mean_entries(a) -> Tensor:
    a = as_tensor(a)
    if a.data.size == 0:
        raise InvalidInputError("mean of an empty tensor")
    n = a.data.size
    out_data = np.sum(a.data) / n

    def _bw():
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(out.grad) / n))

    out = _node(out_data, (a,), _bw)
    return out


def mean_rows(a) -> Tensor:
    """Column means of a 2-D tensor: the pooling step of the text encoder."""
    a = as_tensor(a)
    if a.data.ndim != 2 or a.data.shape[0] == 0:
        raise InvalidInputError(f"mean_rows needs a non-empty 2-D tensor, got {a.data.shape}")
    rows = a.data.shape[0]
    out_data = a.data.mean(axis=0)

    def _bw():
        if a.requires_grad:
            a.accumulate_grad(np.tile(out.grad / rows, (rows, 1)))

    out = _node(out_data, (a,), _bw)
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 1-D rows and/or 2-D blocks into one matrix."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise InvalidInputError("concat_rows of nothing")
    blocks = [p.data if p.data.ndim == 2 else p.data[None, :] for p in parts]
    width = blocks[0].shape[1]
    if any(b.shape[1] != width for b in blocks):
        raise ShapeError("concat_rows: column counts differ")
    out_data = np.concatenate(blocks, axis=0)

    def _bw():
        g = out.grad
        offset = 0
        for p, b in zip(parts, blocks):
            n = b.shape[0]
            if p.requires_grad:
                piece = g[offset : offset + n]
                p.accumulate_grad(piece if p.data.ndim == 2 else piece[0])
            offset += n

    out = _node(out_data, tuple(parts), _bw)
    return out


def stack_scalars(scalars: Sequence[Tensor]) -> Tensor:
    scalars = [as_tensor(s) for s in scalars]
    if not scalars:
        raise InvalidInputError("stack_scalars of nothing")
    if any(s.data.ndim != 0 for s in scalars):
        raise ShapeError("stack_scalars takes 0-D tensors")
    out_data = np.array([s.data for s in scalars])

    def _bw():
        g = out.grad
        for i, s in enumerate(scalars):
            if s.requires_grad:
                s.accumulate_grad(g[i])

    out = _node(out_data, tuple(scalars), _bw)
    return out


def pick(a, index: int) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 1:
        raise ShapeError("pick indexes a 1-D tensor")
    if not 0 <= index < a.data.shape[0]:
        raise IndexError(f"pick: index {index} out of range [0, {a.data.shape[0]})")

    def _bw():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[index] = float(out.grad)
            a.accumulate_grad(g)

    out = _node(a.data[index], (a,), _bw)
    return out


def div(a, s) -> Tensor:
    """Elementwise division of a tensor by a scalar tensor."""
    a, s = as_tensor(a), as_tensor(s)
    if s.data.ndim != 0:
        raise ShapeError("div divides by a 0-D tensor")
    denom = float(s.data)
    if abs(denom) < _NORM_EPS:
        raise DegenerateVectorError("div by (near-)zero scalar")
    out_data = a.data / denom

    def _bw():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(g / denom)
        if s.requires_grad:
            s.accumulate_grad(np.asarray(-np.sum(g * a.data) / denom**2))

    out = _node(out_data, (a, s), _bw)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise InvalidInputError("log of non-positive entries")
    out_data = np.log(a.data)

    def _bw():
        if a.requires_grad:
            a.accumulate_grad(out.grad / a.data)

    out = _node(out_data, (a,), _bw)
    return out


def l2_normalize(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 1:
        raise ShapeError("l2_normalize takes a 1-D tensor")
    norm = float(np.linalg.norm(a.data))
    if norm <= _NORM_EPS:
        raise DegenerateVectorError("cannot normalize a (near-)zero vector")
    y = a.data / norm

    def _bw():
        if a.requires_grad:
            g = out.grad
            a.accumulate_grad((g - y * np.dot(y, g)) / norm)

    out = _node(y, (a,), _bw)
    return out


def normalize_rows(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("normalize_rows takes a 2-D tensor")
    norms = np.linalg.norm(a.data, axis=1)
    if np.any(norms <= _NORM_EPS):
        raise DegenerateVectorError("cannot normalize a (near-)zero row")
    y = a.data / norms[:, None]

    def _bw():
        if a.requires_grad:
            g = out.grad
            dots = np.sum(y * g, axis=1, keepdims=True)
            a.accumulate_grad((g - y * dots) / norms[:, None])

    out = _node(y, (a,), _bw)
    return out


def dot_rows(a, b) -> Tensor:
    """Row-wise dot products of two equal-shape matrices."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or a.data.shape != b.data.shape:
        raise ShapeError(f"dot_rows: {a.data.shape} vs {b.data.shape}")
    out_data = np.sum(a.data * b.data, axis=1)

    def _bw():
        g = out.grad[:, None]
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    out = _node(out_data, (a, b), _bw)
    return out


def cosine_similarity(a, b) -> Tensor:
    """Cosine of the angle between two vectors, clamped to [-1, 1]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError("cosine_similarity takes 1-D tensors")
    if a.data.shape != b.data.shape:
        raise ShapeError(f"cosine_similarity: {a.data.shape} vs {b.data.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na <= _NORM_EPS or nb <= _NORM_EPS:
        raise DegenerateVectorError("cosine of a (near-)zero vector")
    c = float(np.clip(np.dot(a.data, b.data) / (na * nb), -1.0, 1.0))

    def _bw():
        g = float(out.grad)
        if a.requires_grad:
            a.accumulate_grad(g * (b.data / (na * nb) - c * a.data / na**2))
        if b.requires_grad:
            b.accumulate_grad(g * (a.data / (na * nb) - c * b.data / nb**2))

    out = _node(np.asarray(c), (a, b), _bw)
    return out


def _softmax_input_grad(p: np.ndarray, upstream: np.ndarray, temperature: float) -> np.ndarray:
    """Jacobian-vector product of softmax-with-temperature at output ``p``."""
    return p * (upstream - np.dot(upstream, p)) / temperature


def softmax(logits, temperature: float = 1.0) -> Tensor:
    """Max-shifted softmax of ``logits / temperature``; output sums to 1."""
    a = as_tensor(logits)
    if a.data.ndim != 1 or a.data.shape[0] == 0:
        raise InvalidInputError(f"softmax needs a non-empty 1-D tensor, got {a.data.shape}")
    temperature = float(temperature)
    if temperature <= 0.0:
        raise HyperparameterError(f"softmax temperature must be > 0, got {temperature}")
    z = a.data / temperature
    e = np.exp(z - z.max())
    p = e / e.sum()

    def _bw():
        if a.requires_grad:
            a.accumulate_grad(_softmax_input_grad(p, out.grad, temperature))

    out = _node(p, (a,), _bw)
    return out


def _check_distribution(v: np.ndarray, what: str) -> None:
    if np.any(v < 0.0):
        raise DistributionError(f"{what} has negative entries")
    total = float(v.sum())
    if abs(total - 1.0) > _DIST_ATOL:
        raise DistributionError(f"{what} sums to {total!r}, not 1")


def kl_divergence(p, q) -> Tensor:
    """sum_i p_i (ln p_i - ln q_i), with the 0 * ln 0 terms dropped."""
    p, q = as_tensor(p), as_tensor(q)
    if p.data.ndim != 1 or q.data.ndim != 1:
        raise ShapeError("kl_divergence takes 1-D tensors")
    if p.data.shape != q.data.shape:
        raise ShapeError(f"kl_divergence: {p.data.shape} vs {q.data.shape}")
    _check_distribution(p.data, "kl_divergence p")
    _check_distribution(q.data, "kl_divergence q")
    if np.any(q.data <= 0.0):
        raise DistributionError("kl_divergence q has zero entries")
    support = p.data > 0.0
    ratio_log = np.zeros_like(p.data)
    ratio_log[support] = np.log(p.data[support]) - np.log(q.data[support])
    value = float(np.dot(p.data, ratio_log))
    if -1e-12 < value < 0.0:  # rounding noise on p ~= q; KL is nonnegative
        value = 0.0

    def _bw():
        g = float(out.grad)
        if p.requires_grad:
            dp = np.where(support, ratio_log + 1.0, 0.0)
            p.accumulate_grad(g * dp)
        if q.requires_grad:
            q.accumulate_grad(g * (-p.data / q.data))

    out = _node(np.asarray(value), (p, q), _bw)
    return out


def cross_entropy(probabilities, target_index: int) -> Tensor:
    """-ln p[target]; expects an already-normalized probability vector."""
    p = as_tensor(probabilities)
    if p.data.ndim != 1:
        raise ShapeError("cross_entropy takes a 1-D tensor")
    if not 0 <= target_index < p.data.shape[0]:
        raise IndexError(f"cross_entropy: target {target_index} out of range [0, {p.data.shape[0]})")
    _check_distribution(p.data, "cross_entropy probabilities")
    pt = float(p.data[target_index])
    if pt <= 0.0:
        raise InvalidInputError("cross_entropy target has zero probability")

    def _bw():
        if p.requires_grad:
            g = np.zeros_like(p.data)
            g[target_index] = -float(out.grad) / pt
            p.accumulate_grad(g)

    out = _node(np.asarray(-np.log(pt)), (p,), _bw)
    return out


def weighted_sum(tensors: Sequence[Tensor], weights: Tensor) -> Tensor:
    """sum_k weights[k] * tensors[k] over equal-shape tensors."""
    tensors = [as_tensor(t) for t in tensors]
    w = as_tensor(weights)
    if not tensors:
        raise InvalidInputError("weighted_sum of nothing")
    if w.data.ndim != 1 or w.data.shape[0] != len(tensors):
        raise ShapeError(f"weighted_sum: {len(tensors)} tensors vs weights {w.data.shape}")
    shape = tensors[0].data.shape
    if any(t.data.shape != shape for t in tensors):
        raise ShapeError("weighted_sum: tensor shapes differ")
    out_data = sum(w.data[k] * tensors[k].data for k in range(len(tensors)))

    def _bw():
        g = out.grad
        for k, t in enumerate(tensors):
            if t.requires_grad:
                t.accumulate_grad(w.data[k] * g)
        if w.requires_grad:
            dw = np.array([np.sum(g * t.data) for t in tensors])
            w.accumulate_grad(dw)

    out = _node(np.asarray(out_data), tuple(tensors) + (w,), _bw)
    return out


def take_rows(table, ids: Sequence[int]) -> Tensor:
    """Row lookup (embedding gather); rows are copied out of the table."""
    t = as_tensor(table)
    if t.data.ndim != 2:
        raise ShapeError("take_rows needs a 2-D table")
    ids = [int(i) for i in ids]
    for i in ids:
        if not 0 <= i < t.data.shape[0]:
            raise IndexError(f"take_rows: row {i} out of range [0, {t.data.shape[0]})")
    out_data = t.data[ids].copy()

    def _bw():
        if t.requires_grad:
            g = np.zeros_like(t.data)
            np.add.at(g, ids, out.grad)
            t.accumulate_grad(g)

    out = _node(out_data, (t,), _bw)
    return out


# ---------------------------------------------------------------------------
# numeric oracle


def finite_difference_gradient(f: Callable[[np.ndarray], float], at: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, entry by entry.

    Double precision sweet spot for ``eps`` is roughly [1e-7, 1e-3].
    """
    at = np.array(at, dtype=np.float64)  # private copy; f sees the perturbed copy
    grad = np.zeros_like(at)
    flat = at.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(at))
        flat[i] = orig - eps
        lo = float(f(at))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst entry gap relative to the larger gradient's scale.

    Two gradients that are both numerically zero agree with error 0.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    if scale < 1e-9:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)
