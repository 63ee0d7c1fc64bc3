"""Dense-tensor math with reverse-mode differentiation.

A ``Tensor`` wraps a numpy buffer plus an optional gradient. Operations
executed while a ``Tape`` is active are recorded in execution order; every
operation is appended after its inputs' producers, so the tape is already
topologically sorted and ``backward`` is a single reverse sweep.

Default precision is float32. Passing float64 buffers switches the whole
computation to 64-bit, which gradient verification relies on.

Thread model: one tape per thread (the active-tape stack is thread local);
tensors are immutable after creation except for gradient accumulation.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DegenerateInputError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Dense n-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None:
            if data.dtype not in (np.float32, np.float64):
                data = data.astype(DEFAULT_DTYPE)
        else:
            data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        if not np.all(np.isfinite(data)):
            raise NumericError("tensor initialised with non-finite values")
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _wrap(data: np.ndarray, requires_grad: bool) -> Tensor:
    """Internal constructor that skips the finite check (hot path)."""
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = requires_grad
    return t


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


class Tape:
    """Ordered record of executed operations, for backward traversal."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    stack = _tape_stack()
    if stack and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        stack[-1].nodes.append(_Node(out, tuple(inputs), backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from loss.

    Gradients accumulate across fan-out. Call ``zero_grad`` on leaves
    between independent backward passes.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g_out = node.out.grad
        if g_out is None:
            continue
        grads = node.backward_fn(g_out)
        for t, g in zip(node.inputs, grads):
            if g is not None and t.requires_grad:
                t.accumulate_grad(g)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the input's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _as_array(x, dtype) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise suite


def add(a: Tensor, b) -> Tensor:
    bd = _as_array(b, a.dtype)
    out = _wrap(a.data + bd, False)
    if isinstance(b, Tensor):
        return _record(
            out,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )
    return _record(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def mul(a: Tensor, b) -> Tensor:
    bd = _as_array(b, a.dtype)
    out = _wrap(a.data * bd, False)
    if isinstance(b, Tensor):
        ad = a.data
        return _record(
            out,
            (a, b),
            lambda g: (
                _unbroadcast(g * bd, a.shape),
                _unbroadcast(g * ad, b.shape),
            ),
        )
    return _record(out, (a,), lambda g: (_unbroadcast(g * bd, a.shape),))


def scale(a: Tensor, c: float) -> Tensor:
    out = _wrap(a.data * c, False)
    return _record(out, (a,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF form: x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    y = xd * cdf
    if not np.all(np.isfinite(y)):
        raise NumericError("gelu produced non-finite values")
    out = _wrap(y, False)

    def bwd(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return _record(out, (x,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    s = e / e.sum(axis=-1, keepdims=True)
    if not np.all(np.isfinite(s)):
        raise NumericError("softmax produced non-finite values")
    out = _wrap(s, False)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    y = xhat * gain.data + bias.data
    if not np.all(np.isfinite(y)):
        raise NumericError("layer_norm produced non-finite values")
    out = _wrap(y, False)

    def bwd(g):
        dgain = _unbroadcast(g * xhat, gain.shape)
        dbias = _unbroadcast(g, bias.shape)
        dxhat = g * gain.data
        mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
        mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
        return (dx, dgain, dbias)

    return _record(out, (x, gain, bias), bwd)


def dropout(x: Tensor, rate: float, rng, train: bool) -> Tensor:
    """Inverted dropout: scaled at train time, identity in eval mode."""
    if not train or rate == 0.0:
        return x
    if not (0.0 <= rate < 1.0):
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    factor = 1.0 / (1.0 - rate)
    out = _wrap(x.data * keep * factor, False)
    return _record(out, (x,), lambda g: (g * keep * factor,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2D matrix product."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = _wrap(a.data @ b.data, False)
    ad, bd = a.data, b.data
    return _record(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None, transpose_w: bool = False) -> Tensor:
    """y = x @ w (+ b), over the last axis of x. transpose_w uses w.T."""
    wd = w.data.T if transpose_w else w.data
    if x.shape[-1] != wd.shape[0]:
        raise ShapeError(f"linear: {x.shape} incompatible with weight {wd.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y2 = x2 @ wd
    if b is not None:
        y2 = y2 + b.data
    out = _wrap(y2.reshape(*lead, wd.shape[1]), False)

    def bwd(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(x.shape)
        gw = x2.T @ g2
        if transpose_w:
            gw = gw.T
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _record(out, inputs, bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over matching leading dimensions."""
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"bmm leading dims differ: {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm inner dims differ: {a.shape} x {b.shape}")
    out = _wrap(a.data @ b.data, False)
    ad, bd = a.data, b.data
    return _record(
        out,
        (a, b),
        lambda g: (g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g),
    )


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(int(i) for i in np.argsort(axes))
    out = _wrap(np.ascontiguousarray(a.data.transpose(axes)), False)
    return _record(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _wrap(a.data.reshape(shape), False)
    orig = a.shape
    return _record(out, (a,), lambda g: (g.reshape(orig),))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather from an embedding table; backward scatter-adds."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(
            f"embedding ids out of range [0, {table.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    out = _wrap(table.data[ids], False)

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, (table,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = _wrap(np.asarray(x.data.sum(), dtype=x.dtype), False)
    shp = x.shape
    return _record(out, (x,), lambda g: (np.broadcast_to(g, shp).astype(x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# losses


def _logsumexp_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))).squeeze(-1)


def _check_targets(logits_shape, targets: np.ndarray) -> None:
    v = logits_shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ContractError(f"target index out of range [0, {v})")


def cross_entropy_with_logits(
    logits: Tensor, targets, loss_mask, label_smoothing: float = 0.0
) -> Tensor:
    """Mean negative log-softmax of targets where loss_mask is true.

    logits: [n, V]; targets: int[n]; loss_mask: bool[n].
    With label_smoothing eps, each position's loss is
    (1-eps) * NLL(target) + eps * mean_v NLL(v).
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(loss_mask, dtype=bool)
    if logits.ndim != 2:
        raise ShapeError(f"cross entropy expects 2D logits, got {logits.shape}")
    if targets.shape != (logits.shape[0],) or mask.shape != (logits.shape[0],):
        raise ShapeError("targets/loss_mask must be 1D and match logits rows")
    _check_targets(logits.shape, targets)
    cnt = int(mask.sum())
    if cnt == 0:
        raise DegenerateInputError("loss_mask selects no positions")

    xd = logits.data
    n, v = xd.shape
    eps = float(label_smoothing)
    lse = _logsumexp_rows(xd)
    tgt_logit = xd[np.arange(n), targets]
    nll = lse - tgt_logit
    if eps:
        uniform_nll = lse - xd.mean(axis=-1)
        nll = (1.0 - eps) * nll + eps * uniform_nll
    loss = (nll * mask).sum() / cnt
    if not np.isfinite(loss):
        raise NumericError("cross entropy produced a non-finite loss")
    out = _wrap(np.asarray(loss, dtype=xd.dtype), False)

    def bwd(g):
        m = xd.max(axis=-1, keepdims=True)
        e = np.exp(xd - m)
        probs = e / e.sum(axis=-1, keepdims=True)
        gl = probs.copy()
        gl[np.arange(n), targets] -= 1.0 - eps
        if eps:
            gl -= eps / v
        gl *= (mask.astype(xd.dtype) / cnt)[:, None]
        return (gl * g,)

    return _record(out, (logits,), bwd)


def sequence_logprob(logits: Tensor, targets, mask) -> Tensor:
    """Per-sequence sum of target log-probabilities over masked positions.

    logits: [B, S, V]; targets: int[B, S]; mask: bool[B, S]; returns [B].
    Differentiable; used to backprop through candidate scores.
    """
    targets = np.asarray(targets, dtype=np.int64)
    m = np.asarray(mask, dtype=bool)
    if logits.ndim != 3:
        raise ShapeError(f"sequence_logprob expects 3D logits, got {logits.shape}")
    _check_targets(logits.shape, targets[m] if m.any() else targets[:0].ravel())
    xd = logits.data
    b, s, v = xd.shape
    lse = _logsumexp_rows(xd)
    tgt = np.take_along_axis(xd, targets[..., None], axis=-1).squeeze(-1)
    lp = ((tgt - lse) * m).sum(axis=-1)
    out = _wrap(lp.astype(xd.dtype), False)

    def bwd(g):
        mx = xd.max(axis=-1, keepdims=True)
        e = np.exp(xd - mx)
        probs = e / e.sum(axis=-1, keepdims=True)
        onehot = np.zeros_like(xd)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        gl = (onehot - probs) * m[..., None]
        return (gl * g[:, None, None],)

    return _record(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    n_samples: int | None = None,
    rng=None,
) -> float:
    """Worst relative discrepancy between analytic and central-difference grads.

    ``fn`` must be a pure closure over ``params`` returning a scalar Tensor.
    Checks every scalar parameter, or ``n_samples`` random ones.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
    backward(tape, loss)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    coords: list[tuple[int, int]] = []
    if n_samples is None:
        for i, p in enumerate(params):
            coords.extend((i, j) for j in range(p.size))
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        sizes = np.array([p.size for p in params])
        total = int(sizes.sum())
        for flat in rng.choice(total, size=min(n_samples, total), replace=False):
            i = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
            j = int(flat - (np.cumsum(sizes)[i - 1] if i else 0))
            coords.append((i, j))

    worst = 0.0
    for i, j in coords:
        p = params[i]
        flat = p.data.reshape(-1)
        orig = flat[j]
        step = epsilon * max(1.0, abs(float(orig)))
        flat[j] = orig + step
        f_plus = fn().item()
        flat[j] = orig - step
        f_minus = fn().item()
        flat[j] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = float(analytic[i].reshape(-1)[j])
        err = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-4)
        worst = max(worst, err)
    return worst
