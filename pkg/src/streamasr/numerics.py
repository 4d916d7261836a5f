"""Dense tensors with tape-based reverse-mode gradients, truncated SVD, and a
finite-difference gradient checker.

Everything trains in wide (float64) arithmetic; narrow (float32) is allowed
for inference-only tensors. Reductions run in sequential row-major order so a
seeded run is bit-reproducible.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

WIDE = np.float64
NARROW = np.float32

_DTYPE_NAMES = {np.dtype(np.float64): "wide", np.dtype(np.float32): "narrow"}


class Tensor:
    """Dense real array, optionally tracked on a Tape for gradients."""

    __slots__ = ("data", "tape", "name", "_parents", "_bwd", "_fwd")

    def __init__(self, data, dtype=None, tape=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPE_NAMES:
            arr = arr.astype(WIDE)
        self.data = arr
        self.tape = tape
        self.name = name
        self._parents = ()
        self._bwd = None
        self._fwd = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return _DTYPE_NAMES[self.data.dtype]

    def astype(self, dtype_name):
        target = WIDE if dtype_name == "wide" else NARROW
        return Tensor(self.data.astype(target))

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive ops; single-writer, one per training thread."""

    def __init__(self):
        self._entries = []
        self._params = {}

    def parameter(self, name, value):
        """Register a named trainable tensor and return its tracked handle."""
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        t = value if isinstance(value, Tensor) else Tensor(value)
        tracked = Tensor(t.data, tape=self, name=name)
        self._params[name] = tracked
        return tracked

    def parameters(self):
        return dict(self._params)

    def _record(self, out):
        self._entries.append(out)

    def __len__(self):
        return len(self._entries)

    def replay(self):
        """Recompute every recorded op in order; return max abs deviation.

        Bit-identical replay reports 0.0.
        """
        worst = 0.0
        for node in self._entries:
            fresh = node._fwd()
            worst = max(worst, float(np.max(np.abs(fresh - node.data))) if fresh.size else 0.0)
        return worst


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*ts):
    for t in ts:
        if t.tape is not None:
            return t.tape
    return None


def _make(data, parents, bwd, fwd):
    """Create an op result; record it only when some parent is tracked."""
    tape = _tape_of(*parents)
    out = Tensor(data, tape=tape)
    if tape is not None:
        out._parents = parents
        out._bwd = bwd
        out._fwd = fwd
        tape._record(out)
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and linear primitives
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    def bwd(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))
    return _make(a.data + b.data, (a, b), bwd, lambda: a.data + b.data)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    def bwd(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))
    return _make(a.data - b.data, (a, b), bwd, lambda: a.data - b.data)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    def bwd(g):
        return ((a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape)))
    return _make(a.data * b.data, (a, b), bwd, lambda: a.data * b.data)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    def bwd(g):
        return ((a, _unbroadcast(g / b.data, a.shape)),
                (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))
    return _make(a.data / b.data, (a, b), bwd, lambda: a.data / b.data)


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    def bwd(g):
        return ((a, g * c),)
    return _make(a.data * c, (a,), bwd, lambda: a.data * c)


def matmul(a, b):
    """Matrix product: 2D @ 2D or 2D @ 1D, inner extents must match."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim not in (1, 2):
        raise ValueError(f"matmul expects 2D @ (1D|2D), got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.data.ndim == 1:
        def bwd(g):
            return ((a, np.outer(g, b.data)), (b, a.data.T @ g))
    else:
        def bwd(g):
            return ((a, g @ b.data.T), (b, a.data.T @ g))
    return _make(a.data @ b.data, (a, b), bwd, lambda: a.data @ b.data)


def transpose(a):
    a = _as_tensor(a)
    def bwd(g):
        return ((a, g.T),)
    return _make(a.data.T, (a,), bwd, lambda: a.data.T)


def dot(a, b):
    """Inner product of two 1D tensors -> scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"dot expects equal-length vectors, got {a.shape} and {b.shape}")
    def bwd(g):
        return ((a, g * b.data), (b, g * a.data))
    return _make(a.data @ b.data, (a, b), bwd, lambda: a.data @ b.data)


def sigmoid(a):
    a = _as_tensor(a)
    out_data = _sigmoid_np(a.data)
    def bwd(g):
        return ((a, g * out_data * (1.0 - out_data)),)
    return _make(out_data, (a,), bwd, lambda: _sigmoid_np(a.data))


def _sigmoid_np(x):
    # Evaluate piecewise to avoid overflow in exp for large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a):
    a = _as_tensor(a)
    out_data = np.tanh(a.data)
    def bwd(g):
        return ((a, g * (1.0 - out_data * out_data)),)
    return _make(out_data, (a,), bwd, lambda: np.tanh(a.data))


def relu(a):
    a = _as_tensor(a)
    def bwd(g):
        return ((a, g * (a.data > 0)),)
    return _make(np.maximum(a.data, 0.0), (a,), bwd, lambda: np.maximum(a.data, 0.0))


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)
    def bwd(g):
        return ((a, g * out_data),)
    return _make(out_data, (a,), bwd, lambda: np.exp(a.data))


def log(a):
    a = _as_tensor(a)
    def bwd(g):
        return ((a, g / a.data),)
    return _make(np.log(a.data), (a,), bwd, lambda: np.log(a.data))


def sqrt(a):
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)
    def bwd(g):
        return ((a, g * 0.5 / out_data),)
    return _make(out_data, (a,), bwd, lambda: np.sqrt(a.data))


def tsum(a):
    """Sum of all entries -> scalar."""
    a = _as_tensor(a)
    def bwd(g):
        return ((a, np.full(a.shape, float(g))),)
    return _make(np.asarray(a.data.sum()), (a,), bwd, lambda: np.asarray(a.data.sum()))


def mean(a):
    a = _as_tensor(a)
    return scale(tsum(a), 1.0 / a.size)


def softmax(v):
    """Stable softmax of a 1D tensor; entries positive, sum to 1."""
    v = _as_tensor(v)
    if v.data.ndim != 1 or v.size == 0:
        raise ValueError(f"softmax expects a non-empty vector, got shape {v.shape}")
    out_data = _softmax_np(v.data)
    def bwd(g):
        s = float(out_data @ g)
        return ((v, out_data * (g - s)),)
    return _make(out_data, (v,), bwd, lambda: _softmax_np(v.data))


def _softmax_np(x):
    shifted = x - x.max()
    e = np.exp(shifted)
    return e / e.sum()


def log_softmax(v):
    v = _as_tensor(v)
    if v.data.ndim != 1 or v.size == 0:
        raise ValueError(f"log_softmax expects a non-empty vector, got shape {v.shape}")
    out_data = _log_softmax_np(v.data)
    def bwd(g):
        return ((v, g - np.exp(out_data) * g.sum()),)
    return _make(out_data, (v,), bwd, lambda: _log_softmax_np(v.data))


def _log_softmax_np(x):
    shifted = x - x.max()
    return shifted - np.log(np.exp(shifted).sum())


# ---------------------------------------------------------------------------
# Indexing, shaping, windows
# ---------------------------------------------------------------------------


def row(m, i):
    """Row i of a 2D tensor as a vector (embedding lookup)."""
    m = _as_tensor(m)
    i = int(i)
    if not 0 <= i < m.shape[0]:
        raise ValueError(f"row index {i} out of range for shape {m.shape}")
    def bwd(g):
        full = np.zeros(m.shape)
        full[i] = g
        return ((m, full),)
    return _make(m.data[i].copy(), (m,), bwd, lambda: m.data[i].copy())


def rows(m, start, stop):
    """Contiguous row slice [start, stop) of a 2D tensor."""
    m = _as_tensor(m)
    def bwd(g):
        full = np.zeros(m.shape)
        full[start:stop] = g
        return ((m, full),)
    return _make(m.data[start:stop].copy(), (m,), bwd, lambda: m.data[start:stop].copy())


def element(v, i):
    """Entry i of a 1D tensor as a scalar."""
    v = _as_tensor(v)
    i = int(i)
    if not 0 <= i < v.size:
        raise ValueError(f"element index {i} out of range for length {v.size}")
    def bwd(g):
        full = np.zeros(v.shape)
        full[i] = g
        return ((v, full),)
    return _make(np.asarray(v.data[i]), (v,), bwd, lambda: np.asarray(v.data[i]))


def narrow(v, start, length):
    """Contiguous slice of a 1D tensor."""
    v = _as_tensor(v)
    def bwd(g):
        full = np.zeros(v.shape)
        full[start:start + length] = g
        return ((v, full),)
    return _make(v.data[start:start + length].copy(), (v,), bwd,
                 lambda: v.data[start:start + length].copy())


def concat(parts):
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.size for p in parts]
    offsets = np.cumsum([0] + sizes)
    def bwd(g):
        return tuple((p, g[offsets[i]:offsets[i + 1]]) for i, p in enumerate(parts))
    return _make(np.concatenate([p.data for p in parts]), tuple(parts), bwd,
                 lambda: np.concatenate([p.data for p in parts]))


def stack_scalars(parts):
    parts = [_as_tensor(p) for p in parts]
    def bwd(g):
        return tuple((p, np.asarray(g[i])) for i, p in enumerate(parts))
    return _make(np.array([float(p.data) for p in parts]), tuple(parts), bwd,
                 lambda: np.array([float(p.data) for p in parts]))


def stack_rows(parts):
    parts = [_as_tensor(p) for p in parts]
    def bwd(g):
        return tuple((p, g[i]) for i, p in enumerate(parts))
    return _make(np.stack([p.data for p in parts]), tuple(parts), bwd,
                 lambda: np.stack([p.data for p in parts]))


def maxpool_time(x, factor):
    """Max-pool rows of a T x e tensor by `factor`; partial final window kept."""
    x = _as_tensor(x)
    if factor < 1:
        raise ValueError(f"pool factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    t, e = x.shape
    n_out = -(-t // factor)

    def fwd():
        return np.stack([x.data[j * factor:min((j + 1) * factor, t)].max(axis=0)
                         for j in range(n_out)])

    out_data = fwd()
    arg = np.stack([x.data[j * factor:min((j + 1) * factor, t)].argmax(axis=0) + j * factor
                    for j in range(n_out)])

    def bwd(g):
        full = np.zeros(x.shape)
        cols = np.arange(e)
        for j in range(n_out):
            full[arg[j], cols] += g[j]
        return ((x, full),)

    return _make(out_data, (x,), bwd, fwd)


def maxpool_pairs(v):
    """Feature max-pool of a 1D tensor: window 2, stride 2 (length must be even)."""
    v = _as_tensor(v)
    if v.size % 2 != 0:
        raise ValueError(f"maxpool_pairs needs even length, got {v.size}")
    pairs = v.data.reshape(-1, 2)
    arg = pairs.argmax(axis=1)
    def bwd(g):
        full = np.zeros(v.shape)
        full[np.arange(len(arg)) * 2 + arg] = g
        return ((v, full),)
    return _make(pairs.max(axis=1), (v,), bwd, lambda: v.data.reshape(-1, 2).max(axis=1))


def moving_sum(v, back, forward):
    """out[t] = sum of v[t-back .. t+forward], windows clipped at the edges."""
    v = _as_tensor(v)
    n = v.size

    def fwd():
        c = np.concatenate(([0.0], np.cumsum(v.data)))
        hi = np.minimum(np.arange(n) + forward + 1, n)
        lo = np.maximum(np.arange(n) - back, 0)
        return c[hi] - c[lo]

    def bwd(g):
        c = np.concatenate(([0.0], np.cumsum(g)))
        hi = np.minimum(np.arange(n) + back + 1, n)
        lo = np.maximum(np.arange(n) - forward, 0)
        return ((v, c[hi] - c[lo]),)

    return _make(fwd(), (v,), bwd, fwd)


def monotonic_alpha(select_probs, alpha_prev):
    """Expected monotonic alignment from selection probabilities.

    q[0] = alpha_prev[0]; q[t] = (1 - p[t-1]) * q[t-1] + alpha_prev[t];
    alpha[t] = p[t] * q[t].
    """
    p = _as_tensor(select_probs)
    ap = _as_tensor(alpha_prev)
    if p.shape != ap.shape or p.data.ndim != 1:
        raise ValueError(f"monotonic_alpha expects matching vectors, got {p.shape} and {ap.shape}")
    n = p.size

    def run():
        q = np.empty(n)
        acc = 0.0
        for t in range(n):
            acc = (1.0 - p.data[t - 1]) * acc + ap.data[t] if t else ap.data[t]
            q[t] = acc
        return q

    q = run()
    out_data = p.data * q

    def bwd(g):
        gp = q * g
        gap = np.zeros(n)
        gq = p.data * g
        for t in range(n - 1, 0, -1):
            gq[t - 1] += (1.0 - p.data[t - 1]) * gq[t]
            gp[t - 1] += -q[t - 1] * gq[t]
            gap[t] += gq[t]
        gap[0] += gq[0]
        return ((p, gp), (ap, gap))

    return _make(out_data, (p, ap), bwd, lambda: p.data * run())


def make_op(out_data, parents, bwd, fwd):
    """Record a custom primitive (used by fused model/loss kernels)."""
    return _make(out_data, tuple(_as_tensor(p) for p in parents), bwd, fwd)


# ---------------------------------------------------------------------------
# Reverse-mode engine
# ---------------------------------------------------------------------------


def backward(tape, loss):
    """Gradients of a scalar loss for every registered parameter.

    Parameters the loss never touches get zero gradients.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")

    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape._entries):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, contrib in node._bwd(g):
            if parent.tape is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib

    out = {}
    for name, p in tape._params.items():
        g = grads.get(id(p))
        out[name] = Tensor(g if g is not None else np.zeros(p.shape))
    return out


# ---------------------------------------------------------------------------
# Truncated SVD via one-sided Jacobi
# ---------------------------------------------------------------------------

_JACOBI_TOL = 1e-12
_JACOBI_MAX_SWEEPS = 60


def _jacobi_orthogonalize(a):
    """One-sided Jacobi: rotate columns of `a` until mutually orthogonal.

    Returns (a_rotated, v) with a_input = a_rotated @ v.T; columns of
    a_rotated are left singular vectors scaled by the singular values.
    """
    a = a.copy()
    n = a.shape[1]
    v = np.eye(n)
    for _ in range(_JACOBI_MAX_SWEEPS):
        worst = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                app = a[:, p] @ a[:, p]
                aqq = a[:, q] @ a[:, q]
                apq = a[:, p] @ a[:, q]
                denom = math.sqrt(app * aqq)
                ratio = abs(apq) / denom if denom > 0.0 else 0.0
                worst = max(worst, ratio)
                if ratio <= _JACOBI_TOL:
                    continue
                zeta = (aqq - app) / (2.0 * apq)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                cs = 1.0 / math.sqrt(1.0 + t * t)
                sn = cs * t
                ap_col = a[:, p].copy()
                a[:, p] = cs * ap_col - sn * a[:, q]
                a[:, q] = sn * ap_col + cs * a[:, q]
                vp_col = v[:, p].copy()
                v[:, p] = cs * vp_col - sn * v[:, q]
                v[:, q] = sn * vp_col + cs * v[:, q]
        if worst <= _JACOBI_TOL:
            break
    return a, v


def truncated_svd(w, r):
    """Best rank-r factorization (left, right) with singular values absorbed left.

    left @ right is the rank-r Frobenius-optimal approximation of w; singular
    values are returned in non-increasing order inside `left`.
    """
    w_arr = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=WIDE)
    if w_arr.ndim != 2:
        raise ValueError(f"truncated_svd expects a matrix, got shape {w_arr.shape}")
    m, n = w_arr.shape
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank {r} out of range for {m}x{n} matrix")

    if m >= n:
        rotated, v = _jacobi_orthogonalize(w_arr)
        norms = np.sqrt((rotated * rotated).sum(axis=0))
        order = np.argsort(-norms)[:r]
        left = rotated[:, order]
        right = v[:, order].T
    else:
        rotated, v = _jacobi_orthogonalize(w_arr.T)
        norms = np.sqrt((rotated * rotated).sum(axis=0))
        order = np.argsort(-norms)[:r]
        left = v[:, order] * norms[order]
        cols = rotated[:, order]
        safe = np.where(norms[order] > 0.0, norms[order], 1.0)
        right = (cols / safe).T

    if isinstance(w, Tensor):
        return Tensor(left), Tensor(right)
    return left, right


def singular_values(w):
    """All singular values of w, non-increasing, via the same Jacobi core."""
    w_arr = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=WIDE)
    a = w_arr if w_arr.shape[0] >= w_arr.shape[1] else w_arr.T
    rotated, _ = _jacobi_orthogonalize(a)
    norms = np.sqrt((rotated * rotated).sum(axis=0))
    return np.sort(norms)[::-1]


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------


def grad_check(f, params, eps=1e-5):
    """Max relative error between taped gradients of f and central differences.

    `f` maps a dict of named Tensors to a scalar Tensor; it is re-evaluated
    at +/- eps per coordinate. Relative error per coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    base = {k: np.array(v.data if isinstance(v, Tensor) else v, dtype=WIDE)
            for k, v in params.items()}

    tape = Tape()
    tracked = {k: tape.parameter(k, v) for k, v in base.items()}
    loss = f(tracked)
    if loss.size != 1 or not np.isfinite(loss.data).all():
        raise ValueError("grad_check needs a finite scalar objective")
    analytic = {k: g.data for k, g in backward(tape, loss).items()}

    def plain_eval(values):
        out = f({k: Tensor(v) for k, v in values.items()})
        val = float(out.data)
        if not math.isfinite(val):
            raise ValueError("objective became non-finite during finite differencing")
        return val

    worst = 0.0
    for name, arr in base.items():
        flat = arr.reshape(-1)
        ana_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = plain_eval(base)
            flat[i] = orig - eps
            lo = plain_eval(base)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(ana_flat[i] - numeric) / max(1e-8, abs(ana_flat[i]) + abs(numeric))
            worst = max(worst, err)
    return worst
