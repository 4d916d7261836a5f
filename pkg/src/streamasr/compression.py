"""Low-rank weight compression and 8-bit quantization.

Retraining keeps full-rank weights but periodically snaps the planned
matrices to their rank-r SVD truncations, so gradients are taken at the
compressed point while optimization still moves through the full space
(the truncation's layer-output error is realized by simply running the
forward pass with snapped weights). A final snap precedes factorization,
after which each planned matrix is stored as the thin pair (U', V^T).

Quantization is asymmetric affine per tensor with a uint8 payload; the
serialized section format is fixed byte-for-byte so checkpoint sizes can
be predicted exactly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import data as dt
from . import model as md
from . import training as tr

LRA_U = ".lra_u"
LRA_V = ".lra_v"


@dataclass(frozen=True)
class LraEntry:
    """One matrix scheduled for rank-r factorization."""

    name: str
    rank: int
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("matrix dimensions must be positive")
        if not 1 <= self.rank <= min(self.rows, self.cols):
            raise ValueError("rank must be in 1..min(rows, cols)")

    @property
    def ratio(self) -> float:
        return compression_ratio(self.rows, self.cols, self.rank)

    @property
    def compresses(self) -> bool:
        """True when the factored form holds fewer numbers than the matrix."""
        return self.rank * (self.rows + self.cols) < self.rows * self.cols


@dataclass(frozen=True)
class LraPlan:
    """Factorization targets plus the distortion period in updates."""

    entries: Tuple[LraEntry, ...]
    period: int

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("period must be >= 1")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("duplicate plan entries")

    def entry(self, name: str) -> Optional[LraEntry]:
        for e in self.entries:
            if e.name == name:
                return e
        return None


def sub_epoch_period(n_examples: int, batch_size: int = 1) -> int:
    """Distortion period: one sixteenth of an epoch's update count."""
    if n_examples < 1 or batch_size < 1:
        raise ValueError("n_examples and batch_size must be >= 1")
    updates = math.ceil(n_examples / batch_size)
    return max(1, math.ceil(updates / 16))


def _rank_for(rows: int, cols: int, ratio: float) -> Optional[int]:
    bound = rows * cols / (rows + cols)
    if bound <= 1.0:
        return None
    r = max(1, round(rows * cols / (ratio * (rows + cols))))
    return min(r, math.ceil(bound) - 1)


def plan_for(params: Dict[str, np.ndarray], period: int, min_dim: int = 64,
             ratio: float = 4.0, edge_ratio: float = 2.0) -> LraPlan:
    """Default plan: factor every matrix with both dims >= min_dim at
    roughly `ratio`, easing off to `edge_ratio` for the first and last
    encoder layers where truncation hurts most."""
    if ratio <= 1.0 or edge_ratio <= 1.0:
        raise ValueError("ratios must exceed 1")
    enc_layers = sorted({int(name.split(".")[1][1:])
                         for name in params
                         if name.startswith("enc.L") and name.endswith(".w_x")})
    edges = set()
    if enc_layers:
        edges = {"enc.L%d." % enc_layers[0], "enc.L%d." % enc_layers[-1]}
    entries = []
    for name in sorted(params):
        w = params[name]
        if w.ndim != 2 or min(w.shape) < min_dim:
            continue
        rho = edge_ratio if any(name.startswith(e) for e in edges) else ratio
        r = _rank_for(w.shape[0], w.shape[1], rho)
        if r is None:
            continue
        entries.append(LraEntry(name, r, w.shape[0], w.shape[1]))
    return LraPlan(tuple(entries), period)


def lra_distortion(w: np.ndarray, rank: int) -> np.ndarray:
    """Difference between the rank-r SVD truncation of `w` and `w` itself."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 2:
        raise ValueError("lra_distortion needs a matrix")
    if not 1 <= rank <= min(w.shape):
        raise ValueError("rank must be in 1..min(m, n)")
    u, s, vt = np.linalg.svd(w, full_matrices=False)
    snapped = (u[:, :rank] * s[:rank]) @ vt[:rank]
    return snapped - w


def _check_plan(params: Dict[str, np.ndarray], plan: LraPlan) -> None:
    for e in plan.entries:
        if e.name not in params:
            raise ValueError("plan names missing tensor %s" % e.name)
        if params[e.name].shape != (e.rows, e.cols):
            raise ValueError("plan shape %s mismatches tensor %s %s"
                             % ((e.rows, e.cols), e.name,
                                params[e.name].shape))


def snap_params(params: Dict[str, np.ndarray], plan: LraPlan) -> Dict[str, np.ndarray]:
    """Replace every planned matrix by its rank-r truncation."""
    _check_plan(params, plan)
    out = dict(params)
    for e in plan.entries:
        w = out[e.name]
        out[e.name] = w + lra_distortion(w, e.rank)
    return out


@dataclass
class LraResult:
    """Retrained weights plus the loss trace observed at snap points."""

    params: Dict[str, np.ndarray]
    snap_losses: List[float]
    metrics: List[dict]
    diverged: bool


def hyper_lra_train(params: Dict[str, np.ndarray], model_cfg: md.ModelConfig,
                    plan: LraPlan, corpus, cfg: tr.TrainConfig, log=None,
                    reset_moments_on_snap: bool = False,
                    use_mwer: bool = False) -> LraResult:
    """Retrain full-rank weights under periodic rank-r snapping.

    Every `plan.period` optimizer updates the planned matrices are snapped
    in place before the update's gradients are evaluated, so the step is
    taken at the compressed point; the validation loss recorded right after
    each snap tracks how much truncation still costs. Ends with one final
    snap. Divergence aborts with the last cleanly finished epoch's weights.
    """
    _check_plan(params, plan)
    corpus = list(corpus)
    if not corpus:
        raise ValueError("corpus must be non-empty")
    train_utts, val_utts = dt.split_corpus(corpus, cfg.val_fraction, cfg.seed)
    if not train_utts or not val_utts:
        raise ValueError("corpus too small to split")
    if cfg.noise_double_sigma > 0:
        train_utts = dt.double_corpus(train_utts, cfg.noise_double_sigma,
                                      cfg.seed)

    scfg = tr.stage_model_config(model_cfg, tr.FINAL_STAGE, cfg.initial_pool)
    params = {k: np.array(v) for k, v in params.items()}
    opt = tr.Adam(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.grad_clip)
    snap_losses: List[float] = []
    metrics: List[dict] = []
    last_good = {k: np.array(v) for k, v in params.items()}
    lr_of = ((lambda s: cfg.mwer_lr) if use_mwer else
             (lambda s: tr.warmup_lr(s, cfg.base_lr, cfg.warmup_steps)))

    def snap_now():
        for e in plan.entries:
            w = params[e.name]
            params[e.name] = w + lra_distortion(w, e.rank)
        snap_losses.append(tr.evaluate(params, scfg, val_utts)[0])
        if reset_moments_on_snap:
            opt.reset_moments()

    update = 0
    for epoch in range(cfg.final_epochs):
        rng = np.random.default_rng([cfg.seed, 8, epoch])
        order = rng.permutation(len(train_utts))
        total, seen = 0.0, 0
        acc: Dict[str, np.ndarray] = {}
        acc_n = 0
        diverged = False

        def flush():
            nonlocal update, acc, acc_n
            update += 1
            if update % plan.period == 0:
                snap_now()
            lr = lr_of(update - 1)
            opt.step(params, {k: g / acc_n for k, g in acc.items()}, lr)
            acc, acc_n = {}, 0

        for idx in order:
            utt = train_utts[int(idx)]
            if use_mwer:
                result = tr._mwer_utterance_loss(params, scfg, utt, cfg)
            else:
                result = tr._utterance_loss(params, scfg, utt, cfg, 1.0, 0.0,
                                            epoch)
            if result is None:
                continue
            loss_val, grads = result
            if not math.isfinite(loss_val):
                diverged = True
                break
            for k, g in grads.items():
                acc[k] = acc[k] + g if k in acc else g
            acc_n += 1
            total += loss_val
            seen += 1
            if acc_n == cfg.batch_size:
                flush()
        if acc_n and not diverged:
            flush()

        val_loss, val_acc = tr.evaluate(params, scfg, val_utts)
        if diverged or not math.isfinite(val_loss):
            return LraResult(last_good, snap_losses, metrics, True)
        m = dict(epoch=epoch, stage=tr.FINAL_STAGE,
                 train_loss=total / max(seen, 1), val_loss=val_loss,
                 val_token_acc=val_acc)
        metrics.append(m)
        if log is not None:
            log(tr.format_metrics_line(m))
        last_good = {k: np.array(v) for k, v in params.items()}

    snap_now()
    return LraResult(params, snap_losses, metrics, False)


def finalize_lra(params: Dict[str, np.ndarray], plan: LraPlan) -> Dict[str, np.ndarray]:
    """Store each planned matrix as the thin pair (U Sigma, V^T).

    The truncated SVD of an already-snapped matrix reproduces it exactly,
    so the factored model matches the snapped one; unplanned tensors carry
    over verbatim.
    """
    _check_plan(params, plan)
    out = {}
    for name in params:
        e = plan.entry(name)
        if e is None:
            out[name] = params[name]
            continue
        u, s, vt = np.linalg.svd(np.asarray(params[name], dtype=float),
                                 full_matrices=False)
        out[name + LRA_U] = u[:, :e.rank] * s[:e.rank]
        out[name + LRA_V] = vt[:e.rank]
    return out


def materialize_lra(params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Reconstruct full matrices from factored pairs for the forward pass.

    Multiplying the factors back differs from chaining the two thin
    products against an input only by float associativity, far inside
    every tolerance this package pins.
    """
    out = {}
    for name, w in params.items():
        if name.endswith(LRA_U):
            base = name[:-len(LRA_U)]
            v = params.get(base + LRA_V)
            if v is None:
                raise ValueError("factored tensor %s lacks its pair" % name)
            out[base] = w @ v
        elif name.endswith(LRA_V):
            if (name[:-len(LRA_V)] + LRA_U) not in params:
                raise ValueError("factored tensor %s lacks its pair" % name)
        else:
            out[name] = w
    return out


def compression_ratio(m: int, n: int, r: int) -> float:
    """Parameter-count ratio mn : r(m+n) of factoring an m x n matrix."""
    if r * (m + n) <= 0:
        raise ValueError("r*(m+n) must be positive")
    return (m * n) / (r * (m + n))


@dataclass(frozen=True)
class QuantTensor:
    """uint8 payload with the affine map back to real values."""

    q: np.ndarray
    scale: float
    zero_point: int
    shape: Tuple[int, ...]


def quantize(w: np.ndarray) -> QuantTensor:
    """Asymmetric affine per-tensor quantization to uint8.

    scale = (max - min)/255 with a degenerate-range guard of 1.0;
    zero_point = round(-min/scale) clamped to 0..255.
    """
    w = np.asarray(w, dtype=float)
    if w.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(w)):
        raise ValueError("cannot quantize non-finite values")
    lo, hi = float(w.min()), float(w.max())
    scale = (hi - lo) / 255.0
    if scale == 0.0:
        scale = 1.0
    zp = int(np.clip(round(-lo / scale), 0, 255))
    q = np.clip(np.round(w / scale + zp), 0, 255).astype(np.uint8)
    return QuantTensor(q, scale, zp, tuple(w.shape))


def dequantize(t: QuantTensor) -> np.ndarray:
    """Map uint8 codes back to reals: scale * (q - zero_point)."""
    return (t.scale * (t.q.astype(float) - t.zero_point)).reshape(t.shape)


def quantize_params(params: Dict[str, np.ndarray]) -> Dict[str, QuantTensor]:
    return {name: quantize(w) for name, w in params.items()}


def dequantize_params(qparams: Dict[str, QuantTensor]) -> Dict[str, np.ndarray]:
    return {name: dequantize(t) for name, t in qparams.items()}


_DTYPE_U8 = 0


def quant_record_size(name: str, rank: int, payload: int) -> int:
    """Exact byte count of one serialized record."""
    return 2 + len(name.encode("utf-8")) + 1 + 1 + 4 * rank + 4 + 1 + payload


def write_quantized(qparams: Dict[str, QuantTensor]) -> bytes:
    """Serialize records: u16 name length, name, u8 dtype tag, u8 rank,
    u32 extents, f32 scale, u8 zero_point, raw uint8 payload. All
    little-endian, records in sorted name order."""
    chunks = []
    for name in sorted(qparams):
        t = qparams[name]
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError("tensor name too long")
        if len(t.shape) > 255:
            raise ValueError("tensor rank too large")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BB", _DTYPE_U8, len(t.shape)))
        for extent in t.shape:
            chunks.append(struct.pack("<I", extent))
        chunks.append(struct.pack("<f", t.scale))
        chunks.append(struct.pack("<B", t.zero_point))
        chunks.append(t.q.tobytes())
    return b"".join(chunks)


def read_quantized(blob: bytes) -> Dict[str, QuantTensor]:
    """Inverse of write_quantized; rejects trailing or truncated bytes."""
    out: Dict[str, QuantTensor] = {}
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise ValueError("truncated quantized checkpoint")
        piece = blob[off:off + n]
        off += n
        return piece

    while off < len(blob):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2))
        if tag != _DTYPE_U8:
            raise ValueError("unknown dtype tag %d" % tag)
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(rank))
        (scale,) = struct.unpack("<f", take(4))
        (zp,) = struct.unpack("<B", take(1))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        q = np.frombuffer(take(count), dtype=np.uint8).reshape(shape).copy()
        if name in out:
            raise ValueError("duplicate tensor %s" % name)
        out[name] = QuantTensor(q, float(scale), int(zp), shape)
    return out
