"""Training losses: label-smoothed cross-entropy, blank-alignment marginal
loss with a brute-force oracle, joint interpolation, and expected word-error
risk over n-best lists."""

from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .numerics import _log_softmax_np, _softmax_np


def ce_loss(logits, targets, smoothing=0.0):
    """Sequence cross-entropy with uniform label smoothing -> scalar.

    The smoothed target puts (1 - smoothing) on the label and smoothing/V on
    every class. `logits` is a sequence of per-step logit vectors aligned
    one-to-one with `targets`.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    logits = list(logits)
    targets = list(targets)
    if len(logits) != len(targets):
        raise ValueError(f"{len(logits)} logit rows vs {len(targets)} targets")
    total = Tensor(np.asarray(0.0))
    for step, (row, y) in enumerate(zip(logits, targets)):
        row = row if isinstance(row, Tensor) else Tensor(row)
        y = int(y)
        if not 0 <= y < row.size:
            raise ValueError(f"target {y} out of range at step {step}")
        lp = nm.log_softmax(row)
        term = nm.scale(nm.element(lp, y), -(1.0 - smoothing))
        if smoothing > 0.0:
            term = nm.sub(term, nm.scale(nm.tsum(lp), smoothing / row.size))
        total = nm.add(total, term)
    return total


def ctc_feasible(n_frames, targets):
    """Whether n_frames can carry the targets (adjacent repeats need a
    separating blank)."""
    targets = list(targets)
    repeats = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    return n_frames >= len(targets) + repeats


def _extended_targets(targets, blank):
    ext = [blank]
    for y in targets:
        ext.append(y)
        ext.append(blank)
    return ext


def _validate_ctc_targets(targets, n_classes, blank):
    for y in targets:
        if y == blank:
            raise ValueError("blank id is reserved and cannot appear in targets")
        if not 0 <= y < n_classes:
            raise ValueError(f"target {y} out of range for {n_classes} classes")


def ctc_loss(logits, targets, blank=None):
    """Negative log marginal probability of all blank/repeat alignments.

    `logits` is T x C (C includes the blank, last column by default).
    Infeasibly short inputs yield an infinite, gradient-free loss; callers
    should test ctc_feasible first. Forward runs the standard log-space
    recursion; backward is the analytic posterior form, fused into one op.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    if logits.data.ndim != 2 or logits.shape[0] == 0:
        raise ValueError(f"ctc_loss needs T x C logits, got shape {logits.shape}")
    t_len, n_classes = logits.shape
    blank = n_classes - 1 if blank is None else int(blank)
    if not 0 <= blank < n_classes:
        raise ValueError(f"blank {blank} out of range for {n_classes} classes")
    targets = [int(y) for y in targets]
    _validate_ctc_targets(targets, n_classes, blank)
    if not ctc_feasible(t_len, targets):
        return Tensor(np.asarray(np.inf))

    ext = np.array(_extended_targets(targets, blank))
    s_len = ext.size
    # skip transition s-2 -> s allowed when s holds a label differing from s-2
    skip_ok = np.zeros(s_len, dtype=bool)
    skip_ok[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    def run():
        lp = np.stack([_log_softmax_np(row) for row in logits.data])
        log_a = np.full((t_len, s_len), -np.inf)
        log_a[0, 0] = lp[0, ext[0]]
        if s_len > 1:
            log_a[0, 1] = lp[0, ext[1]]
        for t in range(1, t_len):
            prev = log_a[t - 1]
            step1 = np.full(s_len, -np.inf)
            step1[1:] = prev[:-1]
            acc = np.logaddexp(prev, step1)
            step2 = np.full(s_len, -np.inf)
            step2[2:] = prev[:-2]
            acc = np.where(skip_ok, np.logaddexp(acc, step2), acc)
            log_a[t] = acc + lp[t, ext]
        tail = log_a[t_len - 1, s_len - 1]
        if s_len > 1:
            tail = np.logaddexp(tail, log_a[t_len - 1, s_len - 2])
        return lp, log_a, tail

    lp, log_a, log_z = run()

    def bwd(g):
        log_b = np.full((t_len, s_len), -np.inf)
        log_b[t_len - 1, s_len - 1] = 0.0
        if s_len > 1:
            log_b[t_len - 1, s_len - 2] = 0.0
        keep = max(s_len - 2, 0)
        fwd_ok = np.zeros(s_len, dtype=bool)
        fwd_ok[:keep] = skip_ok[2:]
        for t in range(t_len - 2, -1, -1):
            nxt = log_b[t + 1] + lp[t + 1, ext]
            step1 = np.full(s_len, -np.inf)
            step1[:-1] = nxt[1:]
            acc = np.logaddexp(nxt, step1)
            step2 = np.full(s_len, -np.inf)
            step2[:keep] = nxt[2:]
            acc = np.where(fwd_ok, np.logaddexp(acc, step2), acc)
            log_b[t] = acc
        occ = np.exp(log_a + log_b - log_z)
        gamma = np.zeros((t_len, n_classes))
        for s in range(s_len):
            gamma[:, ext[s]] += occ[:, s]
        grad = np.exp(lp) * gamma.sum(axis=1, keepdims=True) - gamma
        return ((logits, float(g) * grad),)

    return nm.make_op(np.asarray(-log_z), (logits,), bwd, lambda: np.asarray(-run()[2]))


def collapse_alignment(path, blank):
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for p in path:
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return tuple(out)


@lru_cache(maxsize=64)
def _alignment_table(t_len, n_classes, blank):
    """All length-T paths grouped by their collapsed sequence."""
    paths = np.array(list(itertools.product(range(n_classes), repeat=t_len)), dtype=np.int64)
    groups = {}
    for idx, path in enumerate(paths):
        groups.setdefault(collapse_alignment(path.tolist(), blank), []).append(idx)
    return paths, {k: np.array(v) for k, v in groups.items()}


def ctc_brute_force(logits, targets, blank=None):
    """Literal enumeration over every alignment path (test oracle)."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    t_len, n_classes = logits.shape
    blank = n_classes - 1 if blank is None else int(blank)
    targets = tuple(int(y) for y in targets)
    _validate_ctc_targets(targets, n_classes, blank)
    if n_classes ** t_len > 10 ** 6:
        raise ValueError(f"{n_classes}^{t_len} paths exceed the enumeration limit")
    paths, groups = _alignment_table(t_len, n_classes, blank)
    idx = groups.get(targets)
    if idx is None:
        return Tensor(np.asarray(np.inf))
    lp = np.stack([_log_softmax_np(row) for row in logits.data])
    path_logp = lp[np.arange(t_len), paths[idx]].sum(axis=1)
    return Tensor(np.asarray(-np.logaddexp.reduce(path_logp)))


def joint_loss(ce, ctc, lam):
    """lam * CE + (1 - lam) * CTC."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"interpolation weight must be in [0, 1], got {lam}")
    ce = ce if isinstance(ce, Tensor) else Tensor(np.asarray(float(ce)))
    ctc = ctc if isinstance(ctc, Tensor) else Tensor(np.asarray(float(ctc)))
    if lam == 1.0:
        return ce
    if lam == 0.0:
        return ctc
    return nm.add(nm.scale(ce, lam), nm.scale(ctc, 1.0 - lam))


def mwer_loss(beams, ref):
    """Expected extra word errors over an n-best list -> scalar.

    `beams` pairs each hypothesis token sequence with its sequence log-prob
    tensor. Hypothesis probabilities are softmax-renormalized over the list;
    error counts, centered by their mean, are constants for gradients.
    """
    beams = list(beams)
    if len(beams) < 2:
        raise ValueError(f"mwer_loss needs at least 2 hypotheses, got {len(beams)}")
    from .decoding import edit_distance
    logprobs = nm.stack_scalars([lp for _, lp in beams])
    errors = np.array([float(edit_distance(ref, tokens)) for tokens, _ in beams])
    centered = errors - errors.mean()
    return nm.dot(nm.softmax(logprobs), Tensor(centered))
