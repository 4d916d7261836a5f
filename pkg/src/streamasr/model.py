"""Encoder/decoder model: time-pooled LSTM stack, monotonic chunkwise
attention, and a per-step prediction head.

Training-time attention uses a differentiable expected alignment; inference
scans frames left to right and attends over a short chunk ending at the
selected frame, so decoding can run while the input streams in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .numerics import _sigmoid_np, _softmax_np

_ENERGY_VARIANTS = ("additive", "modified")
_POOL_CHOICES = (1, 2, 4, 8, 16, 32)


def _tensor(v):
    return v if isinstance(v, Tensor) else Tensor(v)


@dataclass(frozen=True)
class EncoderConfig:
    """Shape of the encoder stack: layers, cell width, and per-gap pooling."""

    layer_count: int = 2
    cell_size: int = 64
    directionality: str = "uni"
    pool_factors: Tuple[int, ...] = (32,)

    def __post_init__(self):
        object.__setattr__(self, "pool_factors", tuple(int(f) for f in self.pool_factors))
        if not 2 <= self.layer_count <= 6:
            raise ValueError(f"layer_count must be in 2..6, got {self.layer_count}")
        if self.cell_size < 1:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        if self.directionality not in ("uni", "bi"):
            raise ValueError(f"directionality must be 'uni' or 'bi', got {self.directionality!r}")
        if len(self.pool_factors) != self.layer_count - 1:
            raise ValueError(
                f"pool_factors length {len(self.pool_factors)} != layer_count - 1"
                f" ({self.layer_count - 1})")
        bad = [f for f in self.pool_factors if f not in _POOL_CHOICES]
        if bad:
            raise ValueError(f"pool factors must be one of {_POOL_CHOICES}, got {bad}")

    @property
    def total_pool(self):
        return math.prod(self.pool_factors)

    @property
    def out_size(self):
        return self.cell_size * (2 if self.directionality == "bi" else 1)


@dataclass(frozen=True)
class ModelConfig:
    """Full model shape; defaults are desk-scale, larger sizes are reachable."""

    input_size: int = 8
    vocab_size: int = 16
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    dec_cell_size: int = 64
    attn_size: int = 64
    embed_size: int = 16
    head_hidden: int = 32
    chunk_size: int = 2
    energy_variant: str = "modified"
    energy_uses_updated_state: bool = False
    mono_noise_std: float = 1.0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.head_hidden < 2 or self.head_hidden % 2 != 0:
            raise ValueError(f"head_hidden must be even and >= 2, got {self.head_hidden}")
        if self.chunk_size < 1:
            raise ValueError(f"chunk_size must be >= 1, got {self.chunk_size}")
        if self.energy_variant not in _ENERGY_VARIANTS:
            raise ValueError(f"energy_variant must be one of {_ENERGY_VARIANTS}")

    @property
    def eos_id(self):
        return self.vocab_size

    @property
    def sos_id(self):
        return self.vocab_size + 1

    @property
    def n_logits(self):
        # regular tokens plus end-of-sequence; start token is embed-only
        return self.vocab_size + 1

    @property
    def enc_out_size(self):
        return self.encoder.out_size


@dataclass(frozen=True)
class AttentionParams:
    """One attention instance's trainable tensors (monotonic and chunk
    attention each hold an independent copy)."""

    enc_proj: Tensor
    state_proj: Tensor
    bias: Tensor
    direction: Tensor
    gain: Tensor
    offset: Tensor


def attention_view(params, prefix):
    return AttentionParams(
        enc_proj=params[f"{prefix}.enc_proj"],
        state_proj=params[f"{prefix}.state_proj"],
        bias=params[f"{prefix}.bias"],
        direction=params[f"{prefix}.direction"],
        gain=params[f"{prefix}.gain"],
        offset=params[f"{prefix}.offset"],
    )


@dataclass
class DecoderState:
    """Per-utterance decoder carry: LSTM state, previous context/token, and
    the attention position (hard index at inference, expected weights in
    training)."""

    h: Tensor
    c: Tensor
    context: Tensor
    token: int
    u: int
    alpha: Optional[Tensor]


@dataclass(frozen=True)
class EncoderMemory:
    """Encoder output plus attention projections computed once per utterance."""

    enc: Tensor
    mono_proj: Tensor
    chunk_proj: Tensor


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def init_params(cfg, seed):
    """Fresh parameter dict (name -> float64 ndarray) for a model shape.

    LSTM weights are uniform +-1/sqrt(fan_in) with forget-gate bias 1; energy
    direction vectors start at unit norm; gains start at 1, offsets at 0.
    """
    rng = np.random.default_rng(seed)
    params = {}

    def uni(shape, fan_in):
        k = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-k, k, size=shape)

    def lstm_block(name, in_size, cell):
        params[f"{name}.w_x"] = uni((4 * cell, in_size), in_size)
        params[f"{name}.w_h"] = uni((4 * cell, cell), cell)
        b = np.zeros(4 * cell)
        b[cell:2 * cell] = 1.0
        params[f"{name}.b"] = b

    enc = cfg.encoder
    for i in range(enc.layer_count):
        in_size = cfg.input_size if i == 0 else enc.out_size
        lstm_block(f"enc.L{i}", in_size, enc.cell_size)
        if enc.directionality == "bi":
            lstm_block(f"enc.L{i}.rev", in_size, enc.cell_size)

    lstm_block("dec", cfg.embed_size + enc.out_size, cfg.dec_cell_size)
    params["embed"] = uni((cfg.vocab_size + 2, cfg.embed_size), cfg.embed_size)

    for name in ("att.mono", "att.chunk"):
        params[f"{name}.enc_proj"] = uni((cfg.attn_size, enc.out_size), enc.out_size)
        params[f"{name}.state_proj"] = uni((cfg.attn_size, cfg.dec_cell_size), cfg.dec_cell_size)
        params[f"{name}.bias"] = np.zeros(cfg.attn_size)
        v = rng.normal(size=cfg.attn_size)
        params[f"{name}.direction"] = v / np.linalg.norm(v)
        params[f"{name}.gain"] = np.asarray(1.0)
        params[f"{name}.offset"] = np.asarray(0.0)

    head_in = cfg.dec_cell_size + enc.out_size
    params["head.fc1_w"] = uni((cfg.head_hidden, head_in), head_in)
    params["head.fc1_b"] = np.zeros(cfg.head_hidden)
    params["head.fc2_w"] = uni((cfg.n_logits, cfg.head_hidden // 2), cfg.head_hidden // 2)
    params["head.fc2_b"] = np.zeros(cfg.n_logits)

    params["ctc.w"] = uni((cfg.n_logits, enc.out_size), enc.out_size)
    params["ctc.b"] = np.zeros(cfg.n_logits)
    return params


def track_params(tape, params):
    """Register every parameter on a tape; returns name -> tracked Tensor."""
    return {name: tape.parameter(name, value) for name, value in params.items()}


def freeze_params(params):
    """Untracked Tensor view of a parameter dict (inference, no gradients)."""
    return {name: _tensor(value) for name, value in params.items()}


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------


def lstm_step(x, h_prev, c_prev, w_x, w_h, b):
    """One LSTM cell update; returns (h, c)."""
    x, h_prev, c_prev = _tensor(x), _tensor(h_prev), _tensor(c_prev)
    w_x, w_h, b = _tensor(w_x), _tensor(w_h), _tensor(b)
    hsz = h_prev.size
    if b.size != 4 * hsz or c_prev.size != hsz:
        raise ValueError(
            f"lstm_step dimension mismatch: state {hsz}, bias {b.size}, cell {c_prev.size}")
    z = nm.add(nm.add(nm.matmul(w_x, x), nm.matmul(w_h, h_prev)), b)
    gi = nm.sigmoid(nm.narrow(z, 0, hsz))
    gf = nm.sigmoid(nm.narrow(z, hsz, hsz))
    gc = nm.tanh(nm.narrow(z, 2 * hsz, hsz))
    go = nm.sigmoid(nm.narrow(z, 3 * hsz, hsz))
    c = nm.add(nm.mul(gf, c_prev), nm.mul(gi, gc))
    h = nm.mul(go, nm.tanh(c))
    return h, c


def _lstm_run(xd, wxd, whd, bd):
    """Sequence LSTM forward in plain numpy; returns (h_all, c_all, gates)."""
    t_len = xd.shape[0]
    hsz = bd.size // 4
    zx = xd @ wxd.T + bd
    gates = np.empty((t_len, 4 * hsz))
    h_all = np.empty((t_len, hsz))
    c_all = np.empty((t_len, hsz))
    h = np.zeros(hsz)
    c = np.zeros(hsz)
    for t in range(t_len):
        z = zx[t] + whd @ h
        gi = _sigmoid_np(z[:hsz])
        gf = _sigmoid_np(z[hsz:2 * hsz])
        gc = np.tanh(z[2 * hsz:3 * hsz])
        go = _sigmoid_np(z[3 * hsz:])
        c = gf * c + gi * gc
        h = go * np.tanh(c)
        gates[t, :hsz] = gi
        gates[t, hsz:2 * hsz] = gf
        gates[t, 2 * hsz:3 * hsz] = gc
        gates[t, 3 * hsz:] = go
        h_all[t] = h
        c_all[t] = c
    return h_all, c_all, gates


def lstm_sequence(x, w_x, w_h, b):
    """LSTM over all rows of a T x D input from a zero start state -> T x H.

    Recorded as a single fused op; the backward pass is handwritten
    backpropagation through time.
    """
    x, w_x, w_h, b = _tensor(x), _tensor(w_x), _tensor(w_h), _tensor(b)
    if x.data.ndim != 2 or b.size % 4 != 0:
        raise ValueError(f"lstm_sequence needs 2D input and 4H bias, got {x.shape}, {b.shape}")
    hsz = b.size // 4
    if w_x.shape != (4 * hsz, x.shape[1]) or w_h.shape != (4 * hsz, hsz):
        raise ValueError(
            f"lstm_sequence dimension mismatch: x {x.shape}, w_x {w_x.shape}, w_h {w_h.shape}")

    h_all, c_all, gates = _lstm_run(x.data, w_x.data, w_h.data, b.data)
    t_len = x.shape[0]

    def bwd(grad):
        dz = np.empty((t_len, 4 * hsz))
        dh = np.zeros(hsz)
        dc = np.zeros(hsz)
        for t in range(t_len - 1, -1, -1):
            gi = gates[t, :hsz]
            gf = gates[t, hsz:2 * hsz]
            gc = gates[t, 2 * hsz:3 * hsz]
            go = gates[t, 3 * hsz:]
            dh = dh + grad[t]
            tc = np.tanh(c_all[t])
            dc = dc + dh * go * (1.0 - tc * tc)
            c_prev = c_all[t - 1] if t else 0.0
            dz[t, :hsz] = dc * gc * gi * (1.0 - gi)
            dz[t, hsz:2 * hsz] = dc * c_prev * gf * (1.0 - gf)
            dz[t, 2 * hsz:3 * hsz] = dc * gi * (1.0 - gc * gc)
            dz[t, 3 * hsz:] = dh * tc * go * (1.0 - go)
            dh = w_h.data.T @ dz[t]
            dc = dc * gf
        h_prev = np.vstack([np.zeros((1, hsz)), h_all[:-1]])
        return ((x, dz @ w_x.data),
                (w_x, dz.T @ x.data),
                (w_h, dz.T @ h_prev),
                (b, dz.sum(axis=0)))

    return nm.make_op(h_all, (x, w_x, w_h, b), bwd,
                      lambda: _lstm_run(x.data, w_x.data, w_h.data, b.data)[0])


def _reverse_rows(x):
    def bwd(g):
        return ((x, g[::-1].copy()),)
    return nm.make_op(x.data[::-1].copy(), (x,), bwd, lambda: x.data[::-1].copy())


def _concat_cols(a, b):
    na = a.shape[1]
    def bwd(g):
        return ((a, g[:, :na]), (b, g[:, na:]))
    return nm.make_op(np.concatenate((a.data, b.data), axis=1), (a, b), bwd,
                      lambda: np.concatenate((a.data, b.data), axis=1))


def encode(features, cfg, params, prefix="enc"):
    """Encoder stack over T x d features -> T' x e embeddings.

    T' = ceil(T / product(pool_factors)); pooling after each non-final layer
    keeps partial right-edge windows. Bi mode runs a second pass over the
    reversed sequence and concatenates features.
    """
    x = _tensor(features)
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"encode needs non-empty T x d features, got shape {x.shape}")
    if x.shape[0] < cfg.total_pool:
        raise ValueError(f"input length {x.shape[0]} shorter than total pooling {cfg.total_pool}")
    for i in range(cfg.layer_count):
        h = lstm_sequence(x, params[f"{prefix}.L{i}.w_x"],
                          params[f"{prefix}.L{i}.w_h"],
                          params[f"{prefix}.L{i}.b"])
        if cfg.directionality == "bi":
            rev = _reverse_rows(x)
            back = lstm_sequence(rev, params[f"{prefix}.L{i}.rev.w_x"],
                                 params[f"{prefix}.L{i}.rev.w_h"],
                                 params[f"{prefix}.L{i}.rev.b"])
            h = _concat_cols(h, _reverse_rows(back))
        if i < cfg.layer_count - 1:
            h = nm.maxpool_time(h, cfg.pool_factors[i])
        x = h
    return x


# ---------------------------------------------------------------------------
# Attention energies
# ---------------------------------------------------------------------------


def _unit_direction(p):
    nrm = nm.sqrt(nm.dot(p.direction, p.direction))
    if float(nrm.data) < 1e-12:
        raise ValueError("energy direction vector has zero norm")
    return nm.div(p.direction, nrm)


def energy(h_t, s, p, variant="modified"):
    """Attention energy of one encoder frame against a decoder state.

    additive: direction . tanh(W_enc h + W_state s + bias)
    modified: gain * unit(direction) . tanh(...) + offset
    """
    if variant not in _ENERGY_VARIANTS:
        raise ValueError(f"energy variant must be one of {_ENERGY_VARIANTS}, got {variant!r}")
    pre = nm.add(nm.add(nm.matmul(p.enc_proj, _tensor(h_t)), nm.matmul(p.state_proj, _tensor(s))),
                 p.bias)
    th = nm.tanh(pre)
    if variant == "additive":
        return nm.dot(th, p.direction)
    return nm.add(nm.mul(nm.dot(th, _unit_direction(p)), p.gain), p.offset)


def _energy_rows(proj_rows, s, p, variant):
    """Energies for all frames at once given precomputed enc projections."""
    pre = nm.add(proj_rows, nm.add(nm.matmul(p.state_proj, s), p.bias))
    th = nm.tanh(pre)
    if variant == "additive":
        return nm.matmul(th, p.direction)
    return nm.add(nm.mul(nm.matmul(th, _unit_direction(p)), p.gain), p.offset)


def prepare_memory(enc, p_mono, p_chunk):
    """Cache the encoder-side attention projections for one utterance."""
    return EncoderMemory(
        enc=enc,
        mono_proj=nm.matmul(enc, nm.transpose(p_mono.enc_proj)),
        chunk_proj=nm.matmul(enc, nm.transpose(p_chunk.enc_proj)),
    )


def attend_full(h, s, p, variant="additive"):
    """Soft attention over every frame -> (context, weights)."""
    h = _tensor(h)
    proj = nm.matmul(h, nm.transpose(p.enc_proj))
    energies = _energy_rows(proj, _tensor(s), p, variant)
    weights = nm.softmax(energies)
    context = nm.matmul(nm.transpose(h), weights)
    return context, weights


def attend_mocha_train(h, s, alpha_prev, p_mono, p_chunk, w=2, variant="modified", noise=None):
    """Differentiable monotonic chunkwise attention -> (context, alpha).

    alpha is the expected alignment; the context averages each frame's
    chunk-softmax weight against that expectation. `noise` (optional array)
    is added to the monotonic energies before the sigmoid.
    """
    mem = h if isinstance(h, EncoderMemory) else prepare_memory(_tensor(h), p_mono, p_chunk)
    if w < 1:
        raise ValueError(f"chunk size must be >= 1, got {w}")
    ap = _tensor(alpha_prev)
    t_len = mem.enc.shape[0]
    if ap.data.ndim != 1 or ap.size != t_len:
        raise ValueError(f"alpha_prev shape {ap.shape} does not match {t_len} frames")
    if np.any(ap.data < 0.0) or float(ap.data.sum()) > 1.0 + 1e-9:
        raise ValueError("alpha_prev must be non-negative and sum to at most 1")

    e_mono = _energy_rows(mem.mono_proj, s, p_mono, variant)
    if noise is not None:
        e_mono = nm.add(e_mono, np.asarray(noise, dtype=float))
    select = nm.sigmoid(e_mono)
    alpha = nm.monotonic_alpha(select, ap)

    e_chunk = _energy_rows(mem.chunk_proj, s, p_chunk, variant)
    # constant shift for exp stability; the weights are shift-invariant
    shifted = nm.sub(e_chunk, float(np.max(e_chunk.data)))
    exp_u = nm.exp(shifted)
    denom = nm.moving_sum(exp_u, w - 1, 0)
    beta = nm.mul(exp_u, nm.moving_sum(nm.div(alpha, denom), 0, w - 1))
    context = nm.matmul(nm.transpose(mem.enc), beta)
    return context, alpha


def _np_energy(proj_row, state_term, p, variant):
    """Energy from an already-projected encoder row, plain numpy."""
    th = np.tanh(proj_row + state_term)
    if variant == "additive":
        return float(th @ p.direction.data)
    nrm = float(np.linalg.norm(p.direction.data))
    if nrm < 1e-12:
        raise ValueError("energy direction vector has zero norm")
    return float(p.gain.data) * float(th @ (p.direction.data / nrm)) + float(p.offset.data)


def attend_mocha_infer(h, s, u_prev, p_mono, p_chunk, w=2, threshold=0.5, variant="modified"):
    """Hard monotonic scan plus chunk softmax -> (context, u) or None.

    Scans frames u_prev, u_prev+1, ... and selects the first whose selection
    probability reaches the threshold; attends over the last `w` frames
    ending at the selection. None means the scan exhausted the input, which
    signals end of decoding, not an error. Frames after the selection are
    never read.
    """
    mem = h if isinstance(h, EncoderMemory) else None
    hd = (mem.enc if mem is not None else _tensor(h)).data
    sd = _tensor(s).data
    t_len = hd.shape[0]
    if not 0 <= u_prev < t_len:
        raise ValueError(f"u_prev {u_prev} out of range for {t_len} frames")

    def mono_row(t):
        return mem.mono_proj.data[t] if mem is not None else p_mono.enc_proj.data @ hd[t]

    def chunk_row(t):
        return mem.chunk_proj.data[t] if mem is not None else p_chunk.enc_proj.data @ hd[t]

    mono_state = p_mono.state_proj.data @ sd + p_mono.bias.data
    selected = -1
    for t in range(u_prev, t_len):
        e = _np_energy(mono_row(t), mono_state, p_mono, variant)
        if _sigmoid_np(np.asarray([e]))[0] >= threshold:
            selected = t
            break
    if selected < 0:
        return None

    lo = max(0, selected - w + 1)
    chunk_state = p_chunk.state_proj.data @ sd + p_chunk.bias.data
    energies = np.array([_np_energy(chunk_row(t), chunk_state, p_chunk, variant)
                         for t in range(lo, selected + 1)])
    weights = _softmax_np(energies)
    context = weights @ hd[lo:selected + 1]
    return Tensor(context), selected


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------


def initial_state(cfg, enc_len):
    """Decoder start state for one utterance (token preset to start symbol)."""
    alpha0 = np.zeros(enc_len)
    alpha0[0] = 1.0
    return DecoderState(
        h=Tensor(np.zeros(cfg.dec_cell_size)),
        c=Tensor(np.zeros(cfg.dec_cell_size)),
        context=Tensor(np.zeros(cfg.enc_out_size)),
        token=cfg.sos_id,
        u=0,
        alpha=Tensor(alpha0),
    )


def decode_step(state, memory, params, cfg, training=False, noise=None):
    """One output step -> (state', logits over tokens + end-of-sequence).

    The decoder LSTM consumes the previous token's embedding and previous
    context; attention then produces this step's context, and the head maps
    [state; context] through FC -> pairwise feature max-pool -> FC. At
    inference (None, None) is returned when attention exhausts the input.
    The caller must set state'.token before the next step.
    """
    if not 0 <= state.token < cfg.vocab_size + 2:
        raise ValueError(f"unknown token id {state.token}")
    emb = nm.row(params["embed"], state.token)
    x = nm.concat([emb, state.context])
    h_new, c_new = lstm_step(x, state.h, state.c,
                             params["dec.w_x"], params["dec.w_h"], params["dec.b"])
    s_energy = h_new if cfg.energy_uses_updated_state else state.h
    p_mono = attention_view(params, "att.mono")
    p_chunk = attention_view(params, "att.chunk")

    if training:
        context, alpha = attend_mocha_train(
            memory, s_energy, state.alpha, p_mono, p_chunk,
            w=cfg.chunk_size, variant=cfg.energy_variant, noise=noise)
        new_u = state.u
    else:
        res = attend_mocha_infer(
            memory, s_energy, state.u, p_mono, p_chunk,
            w=cfg.chunk_size, variant=cfg.energy_variant)
        if res is None:
            return None, None
        context, new_u = res
        alpha = state.alpha

    head_in = nm.concat([h_new, context])
    hidden = nm.tanh(nm.add(nm.matmul(params["head.fc1_w"], head_in), params["head.fc1_b"]))
    pooled = nm.maxpool_pairs(hidden)
    logits = nm.add(nm.matmul(params["head.fc2_w"], pooled), params["head.fc2_b"])
    new_state = DecoderState(h=h_new, c=c_new, context=context,
                             token=-1, u=new_u, alpha=alpha)
    return new_state, logits


def ctc_logits(enc, params):
    """Per-frame token + blank logits from encoder output (blank is last)."""
    return nm.add(nm.matmul(enc, nm.transpose(params["ctc.w"])), params["ctc.b"])


def teacher_logits(params, cfg, features, targets, rng=None, enc=None):
    """Teacher-forced decoder logits; one row per target plus end-of-sequence.

    `rng` draws the pre-sigmoid selection noise (std cfg.mono_noise_std);
    pass None at evaluation time. Returns a list of len(targets)+1 logit
    vectors.
    """
    for tok in targets:
        if not 0 <= tok < cfg.vocab_size:
            raise ValueError(f"target token {tok} outside vocabulary")
    if enc is None:
        enc = encode(features, cfg.encoder, params)
    p_mono = attention_view(params, "att.mono")
    p_chunk = attention_view(params, "att.chunk")
    memory = prepare_memory(enc, p_mono, p_chunk)
    state = initial_state(cfg, enc.shape[0])
    out = []
    for tok in [cfg.sos_id] + list(targets):
        state.token = int(tok)
        noise = None
        if rng is not None and cfg.mono_noise_std > 0:
            noise = rng.normal(0.0, cfg.mono_noise_std, enc.shape[0])
        state, logits = decode_step(state, memory, params, cfg, training=True, noise=noise)
        out.append(logits)
    return out
