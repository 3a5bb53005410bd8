"""Dense float64 tensors with a reverse-mode gradient tape and an Adam step.

The primitive set is deliberately small: matmul, add, mul, gelu, layer_norm,
softmax, embedding (row gather), cross_entropy, concat and row/column slices.
Everything else in the package composes from these, so the backward-rule
surface stays auditable. Gradients accumulate additively into ``Tensor.grad``
and are zeroed explicitly by the caller (see :func:`zero_grads`).
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import NumericError, ShapeError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Additive mask value for disallowed attention logits. Large enough that the
# stabilized softmax underflows the masked entries to exactly 0.0.
NEG_INF = -1e30


class Tensor:
    """A dense array of float64 scalars, optionally tracked for gradients.

    ``data`` is the value, ``grad`` (same shape, lazily allocated) collects
    d(loss)/d(self) across backward passes. Tensors created inside an active
    :class:`Tape` participate in the recorded graph; tensors with no tape are
    plain immutable values.
    """

    __slots__ = ("data", "grad", "requires_grad", "_on_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor initialized with non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._on_tape = False

    @classmethod
    def _raw(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path for op outputs: skips the finiteness scan.
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._on_tape = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def param(data, rng: np.random.Generator | None = None, scale: float | None = None) -> Tensor:
    """Create a trainable tensor; with ``rng``/``scale``, normal init of that shape."""
    if rng is not None:
        data = rng.normal(0.0, scale if scale is not None else 0.02, size=data)
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class Tape:
    """Ordered record of primitive applications for one backward replay.

    Used as a context manager; ops executed inside record themselves here.
    Each thread owns its own tape stack, so inference on shared parameters is
    safe to run concurrently as long as each worker opens its own tape (or
    none at all).
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, object]] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def __enter__(self) -> "Tape":
        _STACK.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _STACK.stack.pop()
        assert popped is self

    def record(self, out: Tensor, backward_fn) -> None:
        out._on_tape = True
        self._nodes.append((out, backward_fn))


class _TapeStack(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_STACK = _TapeStack()


def _active_tape() -> Tape | None:
    return _STACK.stack[-1] if _STACK.stack else None


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._on_tape


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every tracked tensor reachable from ``loss``.

    Walks the tape once in reverse execution order; a tensor used on several
    paths receives the sum of all path gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    _accum(loss, np.ones_like(loss.data))
    for out, backward_fn in reversed(tape._nodes):
        if out.grad is None:
            continue  # branch never reached the loss
        backward_fn(out.grad)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    """Matrix product of 2-d tensors, with optional operand transposes."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    left = a.data.T if transpose_a else a.data
    right = b.data.T if transpose_b else b.data
    if left.shape[1] != right.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {left.shape} x {right.shape}")
    out = Tensor._raw(left @ right)
    tape = _active_tape()
    if tape is not None and (_tracked(a) or _tracked(b)):
        track_a, track_b = _tracked(a), _tracked(b)

        def _backward(g: np.ndarray) -> None:
            if track_a:
                da = g @ right.T
                _accum(a, da.T if transpose_a else da)
            if track_b:
                db = left.T @ g
                _accum(b, db.T if transpose_b else db)

        tape.record(out, _backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    out = Tensor._raw(a.data + b.data)
    tape = _active_tape()
    if tape is not None and (_tracked(a) or _tracked(b)):
        track_a, track_b = _tracked(a), _tracked(b)
        sa, sb = a.data.shape, b.data.shape

        def _backward(g: np.ndarray) -> None:
            if track_a:
                _accum(a, _unbroadcast(g, sa))
            if track_b:
                _accum(b, _unbroadcast(g, sb))

        tape.record(out, _backward)
    return out


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a tensor or a plain python scalar."""
    if isinstance(b, Tensor):
        out = Tensor._raw(a.data * b.data)
        tape = _active_tape()
        if tape is not None and (_tracked(a) or _tracked(b)):
            track_a, track_b = _tracked(a), _tracked(b)
            sa, sb = a.data.shape, b.data.shape
            da_val, db_val = b.data, a.data

            def _backward(g: np.ndarray) -> None:
                if track_a:
                    _accum(a, _unbroadcast(g * da_val, sa))
                if track_b:
                    _accum(b, _unbroadcast(g * db_val, sb))

            tape.record(out, _backward)
        return out
    scale = float(b)
    out = Tensor._raw(a.data * scale)
    tape = _active_tape()
    if tape is not None and _tracked(a):
        def _backward(g: np.ndarray) -> None:
            _accum(a, g * scale)

        tape.record(out, _backward)
    return out


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, exact erf form."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = Tensor._raw(x.data * cdf)
    tape = _active_tape()
    if tape is not None and _tracked(x):
        xv = x.data

        def _backward(g: np.ndarray) -> None:
            pdf = np.exp(-0.5 * xv * xv) * _INV_SQRT_2PI
            _accum(x, g * (cdf + xv * pdf))

        tape.record(out, _backward)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data
    if not np.all(np.isfinite(out_data)):
        raise NumericError("layer_norm produced non-finite values")
    out = Tensor._raw(out_data)
    tape = _active_tape()
    if tape is not None and (_tracked(x) or _tracked(gain) or _tracked(bias)):
        track_x, track_g, track_b = _tracked(x), _tracked(gain), _tracked(bias)
        n = x.data.shape[-1]
        gain_shape, bias_shape = gain.data.shape, bias.data.shape

        def _backward(g: np.ndarray) -> None:
            if track_g:
                _accum(gain, _unbroadcast(g * xhat, gain_shape))
            if track_b:
                _accum(bias, _unbroadcast(g, bias_shape))
            if track_x:
                dxhat = g * gain.data
                term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
                _accum(x, inv * term)

        tape.record(out, _backward)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``."""
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._raw(y)
    tape = _active_tape()
    if tape is not None and _tracked(x):
        def _backward(g: np.ndarray) -> None:
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accum(x, (g - dot) * y)

        tape.record(out, _backward)
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-d tensor; backward scatter-adds into the table."""
    idx = np.asarray(ids, dtype=np.intp)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be 2-d, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(f"embedding ids out of range for table with {table.data.shape[0]} rows")
    out = Tensor._raw(table.data[idx])
    tape = _active_tape()
    if tape is not None and _tracked(table):
        def _backward(g: np.ndarray) -> None:
            dt = np.zeros_like(table.data)
            np.add.at(dt, idx, g)
            _accum(table, dt)

        tape.record(out, _backward)
    return out


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Negative log softmax probability of the target class(es).

    With an integer target, ``logits`` is treated as one score vector (any
    shape of total size V). With a sequence of targets, ``logits`` must be
    [N x V] and the result is the mean over the N rows.
    """
    if np.isscalar(target) or isinstance(target, (int, np.integer)):
        flat = logits.data.reshape(-1)
        t = int(target)
        if not 0 <= t < flat.size:
            raise IndexError(f"cross_entropy target {t} out of range for {flat.size} classes")
        m = flat.max()
        lse = m + math.log(np.exp(flat - m).sum())
        out = Tensor._raw(np.asarray(lse - flat[t], dtype=np.float64))
        tape = _active_tape()
        if tape is not None and _tracked(logits):
            shape = logits.data.shape

            def _backward(g: np.ndarray) -> None:
                p = np.exp(flat - lse)
                p[t] -= 1.0
                _accum(logits, (p * float(g)).reshape(shape))

            tape.record(out, _backward)
        return out

    targets = np.asarray(target, dtype=np.intp)
    if logits.data.ndim != 2:
        raise ShapeError(f"batched cross_entropy expects [N x V] logits, got {logits.shape}")
    n, v = logits.data.shape
    if targets.shape != (n,):
        raise ShapeError(f"expected {n} targets, got shape {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"cross_entropy target out of range for {v} classes")
    m = logits.data.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logits.data - m).sum(axis=1, keepdims=True))
    losses = lse[:, 0] - logits.data[np.arange(n), targets]
    out = Tensor._raw(np.asarray(losses.mean(), dtype=np.float64))
    tape = _active_tape()
    if tape is not None and _tracked(logits):
        def _backward(g: np.ndarray) -> None:
            p = np.exp(logits.data - lse)
            p[np.arange(n), targets] -= 1.0
            _accum(logits, p * (float(g) / n))

        tape.record(out, _backward)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate tensors along ``axis``; backward splits the gradient."""
    tensors = list(tensors)
    out = Tensor._raw(np.concatenate([t.data for t in tensors], axis=axis))
    tape = _active_tape()
    if tape is not None and any(_tracked(t) for t in tensors):
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def _backward(g: np.ndarray) -> None:
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if _tracked(t):
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    _accum(t, g[tuple(sl)])

        tape.record(out, _backward)
    return out


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice a contiguous row range [start, stop) of a 1-d or 2-d tensor."""
    if not 0 <= start <= stop <= x.data.shape[0]:
        raise ShapeError(f"row slice [{start}, {stop}) out of bounds for shape {x.shape}")
    out = Tensor._raw(x.data[start:stop].copy())
    tape = _active_tape()
    if tape is not None and _tracked(x):
        def _backward(g: np.ndarray) -> None:
            dx = np.zeros_like(x.data)
            dx[start:stop] = g
            _accum(x, dx)

        tape.record(out, _backward)
    return out


def cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice a contiguous column range [start, stop) of a 2-d tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"cols expects a 2-d tensor, got {x.shape}")
    if not 0 <= start <= stop <= x.data.shape[1]:
        raise ShapeError(f"column slice [{start}, {stop}) out of bounds for shape {x.shape}")
    out = Tensor._raw(x.data[:, start:stop].copy())
    tape = _active_tape()
    if tape is not None and _tracked(x):
        def _backward(g: np.ndarray) -> None:
            dx = np.zeros_like(x.data)
            dx[:, start:stop] = g
            _accum(x, dx)

        tape.record(out, _backward)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias (composition, not a new primitive)."""
    return add(matmul(x, weight), bias)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries of a 2-d tensor, composed from matmul."""
    if x.data.ndim != 2:
        raise ShapeError(f"sum_all expects a 2-d tensor, got {x.shape}")
    m, n = x.data.shape
    left = constant(np.ones((1, m)))
    right = constant(np.ones((n, 1)))
    return matmul(matmul(left, x), right)


def mean_all(x: Tensor) -> Tensor:
    return mul(sum_all(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, applied in place to ``params``.

    ``grads`` entries may be ``None`` for parameters untouched this step;
    their moments still decay.
    """
    if len(params) != len(state.m):
        raise ShapeError("optimizer state does not match parameter list")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state
