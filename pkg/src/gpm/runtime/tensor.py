"""Tensor type and differentiable operations.

Forward values are plain numpy arrays; each op records a closure that
accumulates exact gradients into its inputs during `Tensor.backward`.  Any
NaN/Inf produced by a forward op or a gradient accumulation raises
`NumericFailure` naming the op.  Stochastic ops (dropout, Gumbel noise) draw
from an explicit numpy Generator and are inert when it is absent.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NumericFailure(RuntimeError):
    """A forward or backward computation produced NaN/Inf."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _ensure_finite(op: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise NumericFailure(f"op '{op}' produced non-finite values")


class Tensor:
    """A numpy array plus an optional gradient and backward closure."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad = None
        self._backward = None
        self._parents = _parents if self.requires_grad else ()
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self._op})"

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray):
        _ensure_finite(f"backward:{self._op}", g)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        """Reverse-mode pass from this tensor; accumulates into `.grad`."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        if grad is None:
            grad = np.ones_like(self.data)
        self.accumulate_grad(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_wrap(other, self.dtype), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _basic_slice(self, key)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(op: str, data: np.ndarray, parents, backward) -> Tensor:
    _ensure_finite(op, data)
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, _parents=tuple(parents), _op=op)
    if requires:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _result("add", data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _result("mul", data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    data = a.data * s

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * s)

    return _result("scale", data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires operands of rank >= 2")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.data.shape))

    return _result("matmul", data, (a, b), backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(old))

    return _result("reshape", data, (a,), backward)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    data = np.swapaxes(a.data, ax1, ax2).copy()

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.swapaxes(g, ax1, ax2))

    return _result("swapaxes", data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _result("concat", data, tuple(tensors), backward)


def _basic_slice(a: Tensor, key) -> Tensor:
    data = a.data[key].copy()

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[key] += g
            a.accumulate_grad(ga)

    return _result("slice", data, (a,), backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of `a` (first axis) by an integer index array.

    Output shape is `indices.shape + a.shape[1:]`; duplicate indices
    accumulate in the backward pass.
    """
    idx = np.asarray(indices, dtype=np.int64)
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            a.accumulate_grad(ga)

    return _result("gather_rows", data, (a,), backward)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Row lookup into an embedding table; alias of `gather_rows`."""
    return gather_rows(table, indices)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            gg = g
            if not keepdims and axis is not None:
                gg = np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(gg, a.data.shape).astype(a.data.dtype, copy=True))

    return _result("sum", data, (a,), backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    out = tensor_sum(a, axis=axis, keepdims=keepdims)
    return scale(out, 1.0 / count)


def max_pool_over_set(a: Tensor, axis: int) -> Tensor:
    """Max over one axis; ties route gradient to the lowest index."""
    data = a.data.max(axis=axis)
    idx = a.data.argmax(axis=axis)

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
            a.accumulate_grad(ga)

    return _result("max_pool", data, (a,), backward)


def mean_pool_over_set(a: Tensor, axis: int) -> Tensor:
    return tensor_mean(a, axis=axis)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0))

    return _result("relu", data, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = (x * cdf).astype(x.dtype)

    def backward(g):
        if a.requires_grad:
            pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
            a.accumulate_grad(g * (cdf + x * pdf).astype(x.dtype))

    return _result("gelu", data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * data)

    return _result("exp", data, (a,), backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return _result("log", data, (a,), backward)


def xlogx(a: Tensor) -> Tensor:
    """x ln x with the x -> 0 limit taken as 0 (entropy terms)."""
    x = a.data
    if np.any(x < 0):
        raise ValueError("xlogx expects nonnegative input")
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.where(x > 0, x * np.log(x), 0.0).astype(x.dtype)

    def backward(g):
        if a.requires_grad:
            with np.errstate(divide="ignore", invalid="ignore"):
                d = np.where(x > 0, np.log(x) + 1.0, 0.0).astype(x.dtype)
            a.accumulate_grad(g * d)

    return _result("xlogx", data, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    data = gamma.data * xhat + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad(_unbroadcast(g * xhat, gamma.data.shape))
        if beta.requires_grad:
            beta.accumulate_grad(_unbroadcast(g, beta.data.shape))
        if a.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            a.accumulate_grad(inv_std * (dxhat - m1 - xhat * m2))

    return _result("layer_norm", data, (a, gamma, beta), backward)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def _softmax_forward(shifted: np.ndarray) -> np.ndarray:
    m = np.max(shifted, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(invalid="ignore"):
        e = np.exp(shifted - m)
    s = e.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(s > 0, e / s, 0.0)
    return p.astype(shifted.dtype, copy=False)


def softmax_with_additive_mask(logits: Tensor, additive_mask=None) -> Tensor:
    """Softmax over the last axis with an additive visibility mask.

    `additive_mask` is a plain array broadcastable to the logits, holding 0
    for visible entries and -inf for hidden ones.  Hidden entries get exact
    zero probability and zero gradient, so fully hidden inputs cannot leak
    into either pass.
    """
    shifted = logits.data if additive_mask is None else logits.data + additive_mask
    p = _softmax_forward(shifted)

    def backward(g):
        if logits.requires_grad:
            inner = (g * p).sum(axis=-1, keepdims=True)
            logits.accumulate_grad(p * (g - inner))

    return _result("softmax_with_additive_mask", p, (logits,), backward)


def log_softmax(logits: Tensor) -> Tensor:
    x = logits.data
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    lse = np.log(e.sum(axis=-1, keepdims=True)) + m
    data = x - lse

    def backward(g):
        if logits.requires_grad:
            p = np.exp(data)
            logits.accumulate_grad(g - p * g.sum(axis=-1, keepdims=True))

    return _result("log_softmax", data, (logits,), backward)


def cross_entropy(logits: Tensor, target_index) -> Tensor:
    """Mean negative log-likelihood of integer targets under the logits.

    `logits` has shape (..., C) and `target_index` shape (...); the mean runs
    over every leading position.
    """
    targets = np.asarray(target_index, dtype=np.int64)
    if targets.shape != logits.data.shape[:-1]:
        raise ValueError(
            f"target shape {targets.shape} does not match logits {logits.data.shape[:-1]}"
        )
    n_classes = logits.data.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise ValueError("target index out of range")
    x = logits.data
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    lse = np.log(e.sum(axis=-1, keepdims=True)) + m
    ll = np.take_along_axis(x - lse, targets[..., None], axis=-1)[..., 0]
    count = max(targets.size, 1)
    data = np.asarray(-ll.sum() / count, dtype=x.dtype)

    def backward(g):
        if logits.requires_grad:
            p = np.exp(x - lse)
            idx = np.indices(targets.shape) if targets.ndim else ()
            p[(*idx, targets)] -= 1.0
            logits.accumulate_grad((g / count) * p)

    return _result("cross_entropy", data, (logits,), backward)


# ---------------------------------------------------------------------------
# stochastic ops
# ---------------------------------------------------------------------------

def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training, p == 0, or rng is None."""
    if not training or p <= 0.0 or rng is None:
        return a
    if p >= 1.0:
        raise ValueError(f"dropout rate must be < 1, got {p}")
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype) / a.data.dtype.type(1.0 - p)
    data = a.data * keep

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * keep)

    return _result("dropout", data, (a,), backward)


def sample_gumbel(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Standard Gumbel noise via -ln(-ln(U))."""
    u = rng.random(shape)
    tiny = np.finfo(np.float64).tiny
    return (-np.log(-np.log(np.maximum(u, tiny)) + tiny)).astype(dtype)


def gumbel_softmax(
    logits: Tensor,
    tau: float,
    hard: bool = False,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> Tensor:
    """Gumbel-softmax relaxation over the last axis.

    Soft mode returns softmax((logits + noise) / tau).  Hard mode returns the
    one-hot argmax of the soft sample in the forward pass while gradients
    flow through the soft sample (straight-through).  Noise comes from `rng`,
    or from the `noise` array (test hook); with neither, noise is zero.
    """
    if tau <= 0:
        raise ValueError(f"gumbel temperature must be positive, got {tau}")
    if noise is None:
        noise = sample_gumbel(logits.data.shape, rng, logits.dtype) if rng is not None \
            else np.zeros_like(logits.data)
    noise = np.asarray(noise, dtype=logits.dtype)
    shifted = (logits.data + noise) / logits.data.dtype.type(tau)
    soft = _softmax_forward(shifted)
    if hard:
        data = np.zeros_like(soft)
        np.put_along_axis(data, soft.argmax(axis=-1, keepdims=True), 1.0, axis=-1)
    else:
        data = soft

    def backward(g):
        if logits.requires_grad:
            inner = (g * soft).sum(axis=-1, keepdims=True)
            logits.accumulate_grad(soft * (g - inner) / logits.data.dtype.type(tau))

    return _result("gumbel_softmax", data, (logits,), backward)


# ---------------------------------------------------------------------------
# set distance
# ---------------------------------------------------------------------------

def chamfer_distance_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Differentiable symmetric Chamfer distance with non-squared norms.

    Accepts (n, 3) vs (m, 3) or batched (B, n, 3) vs (B, m, 3); batched input
    yields a (B,) tensor of per-cloud distances.  At zero-distance pairs the
    subgradient is taken as zero.
    """
    a, b = pred.data, target.data
    squeeze = a.ndim == 2
    if squeeze:
        a, b = a[None], b[None]
    if a.ndim != 3 or b.ndim != 3 or a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ValueError("chamfer expects (n, 3) or (B, n, 3) point arrays")
    if a.shape[1] == 0 or b.shape[1] == 0:
        raise ValueError("chamfer inputs must be non-empty")
    bsz, n, m = a.shape[0], a.shape[1], b.shape[1]
    a2 = np.sum(a * a, axis=2)[:, :, None]
    b2 = np.sum(b * b, axis=2)[:, None, :]
    d2 = a2 + b2 - 2.0 * np.matmul(a, np.swapaxes(b, 1, 2))
    i_ab = np.argmin(d2, axis=2)  # (B, n) nearest target per pred point
    i_ba = np.argmin(d2, axis=1)  # (B, m) nearest pred per target point
    batch = np.arange(bsz)[:, None]
    diff_ab = a - b[batch, i_ab]
    diff_ba = b - a[batch, i_ba]
    d_ab = np.linalg.norm(diff_ab, axis=2)
    d_ba = np.linalg.norm(diff_ba, axis=2)
    per_cloud = d_ab.mean(axis=1) + d_ba.mean(axis=1)
    data = per_cloud[0] if squeeze else per_cloud

    def backward(g):
        gb = np.asarray(g).reshape(bsz, 1, 1)
        with np.errstate(invalid="ignore", divide="ignore"):
            u_ab = np.where(d_ab[..., None] > 0, diff_ab / d_ab[..., None], 0.0)
            u_ba = np.where(d_ba[..., None] > 0, diff_ba / d_ba[..., None], 0.0)
        if pred.requires_grad:
            ga = gb * u_ab / n
            back = np.zeros_like(a)
            np.add.at(back, (batch.repeat(m, axis=1), i_ba), -gb * u_ba / m)
            ga = ga + back
            pred.accumulate_grad(ga[0] if squeeze else ga)
        if target.requires_grad:
            gt = gb * u_ba / m
            back = np.zeros_like(b)
            np.add.at(back, (batch.repeat(n, axis=1), i_ab), -gb * u_ab / n)
            gt = gt + back
            target.accumulate_grad(gt[0] if squeeze else gt)

    return _result("chamfer_distance_l1", data, (pred, target), backward)
