"""Optimization loop: staged encoder growth with per-stage learning-rate
warm-up, joint CE/CTC weighting, scheduled sampling, feature masking, and
n-best sequence-risk fine-tuning.

The encoder starts shallow with aggressive time pooling and gains one layer
per stage while the pooling budget is redistributed; the last stage only
relaxes pooling. Utterances too short to carry their label sequence under
the current pooling contribute cross-entropy only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import data as dt
from . import losses
from . import model as md
from . import numerics as nm
from .numerics import Tape, Tensor

N_STAGES = 6
FINAL_STAGE = N_STAGES - 1
MWER_STAGE = N_STAGES


@dataclass(frozen=True)
class PretrainStage:
    """Encoder shape at one growth stage."""

    index: int
    encoder_layers: int
    pool_factors: Tuple[int, ...]


def pretrain_schedule(stage: int, initial_pool: int = 32) -> PretrainStage:
    """Stage layout: each stage adds a layer and splits the top pool factor.

    Stage 0 is two layers over one wide pooling gap; the final stage keeps
    six layers but relaxes total pooling to 8.
    """
    if initial_pool not in (16, 32):
        raise ValueError("initial_pool must be 16 or 32")
    if not 0 <= stage <= FINAL_STAGE:
        raise ValueError("stage must be in 0..%d" % FINAL_STAGE)
    if stage == FINAL_STAGE:
        return PretrainStage(stage, 6, (2, 2, 2, 1, 1))
    top = max(initial_pool >> stage, 1)
    return PretrainStage(stage, stage + 2, (2,) * stage + (top,))


def stage_model_config(cfg: md.ModelConfig, stage: int,
                       initial_pool: int = 32) -> md.ModelConfig:
    """Model configuration with the encoder shaped for `stage`."""
    plan = pretrain_schedule(stage, initial_pool)
    enc = replace(cfg.encoder, layer_count=plan.encoder_layers,
                  pool_factors=plan.pool_factors)
    return replace(cfg, encoder=enc)


def grow_encoder(params: Dict[str, np.ndarray], cfg: md.ModelConfig,
                 new_stage: int, seed: int, initial_pool: int = 32) -> Dict[str, np.ndarray]:
    """Parameters for stage `new_stage` from stage `new_stage - 1`.

    Existing tensors carry over verbatim; a freshly initialized top LSTM
    layer is added when the stage adds one (the last transition only changes
    pooling). Shape mismatches are rejected.
    """
    if not 1 <= new_stage <= FINAL_STAGE:
        raise ValueError("new_stage must be in 1..%d" % FINAL_STAGE)
    prev = pretrain_schedule(new_stage - 1, initial_pool)
    cur = pretrain_schedule(new_stage, initial_pool)
    enc = cfg.encoder
    suffixes = (".rev", "") if enc.directionality == "bi" else ("",)
    for i in range(prev.encoder_layers):
        for suf in suffixes:
            key = "enc.L%d%s.w_h" % (i, suf)
            if key not in params:
                raise ValueError("missing encoder layer tensor %s" % key)
            if params[key].shape != (4 * enc.cell_size, enc.cell_size):
                raise ValueError("encoder tensor %s has shape %s, expected %s"
                                 % (key, params[key].shape,
                                    (4 * enc.cell_size, enc.cell_size)))
    out = dict(params)
    if cur.encoder_layers == prev.encoder_layers:
        return out

    new_index = prev.encoder_layers
    for suf in suffixes:
        if "enc.L%d%s.w_x" % (new_index, suf) in params:
            raise ValueError("layer enc.L%d already present" % new_index)
    stage_cfg = stage_model_config(cfg, new_stage, initial_pool)
    in_size = stage_cfg.encoder.out_size
    rng = np.random.default_rng([seed, 100 + new_stage])

    def uni(shape, fan_in):
        k = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-k, k, size=shape)

    for suf in suffixes:
        name = "enc.L%d%s" % (new_index, suf)
        out[name + ".w_x"] = uni((4 * enc.cell_size, in_size), in_size)
        out[name + ".w_h"] = uni((4 * enc.cell_size, enc.cell_size), enc.cell_size)
        b = np.zeros(4 * enc.cell_size)
        b[enc.cell_size:2 * enc.cell_size] = 1.0
        out[name + ".b"] = b
    return out


def warmup_lr(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear ramp from zero; flat at base_lr once warm-up completes."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup_steps < 1:
        raise ValueError("warmup_steps must be >= 1")
    return base_lr * min(1.0, step / warmup_steps)


@dataclass
class TrainConfig:
    """Optimization settings for the staged training run."""

    seed: int = 17
    base_lr: float = 3e-3
    warmup_steps: int = 150
    batch_size: int = 1
    epochs_per_stage: int = 1
    final_epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    label_smoothing: float = 0.0
    use_ctc: bool = True
    ce_weight_start: float = 0.8
    augment: Optional[dt.AugmentPolicy] = None
    augment_auto: bool = True
    noise_double_sigma: float = 0.1
    sched_start: int = 7
    sched_ramp: int = 4
    sched_max: float = 0.25
    start_stage: int = 0
    initial_pool: int = 32
    val_fraction: float = 0.05
    mwer_epochs: int = 0
    mwer_beam: int = 4
    mwer_ce_weight: float = 0.6
    mwer_lr: float = 5e-4

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if not 0.0 <= self.ce_weight_start <= 1.0:
            raise ValueError("ce_weight_start must be in [0, 1]")
        if not 0 <= self.start_stage <= FINAL_STAGE:
            raise ValueError("start_stage must be in 0..%d" % FINAL_STAGE)
        if self.sched_ramp < 1:
            raise ValueError("sched_ramp must be >= 1")
        if not 0.0 <= self.sched_max <= 1.0:
            raise ValueError("sched_max must be in [0, 1]")
        if self.mwer_epochs < 0 or self.mwer_beam < 2:
            raise ValueError("bad sequence-risk fine-tune settings")
        if self.noise_double_sigma < 0:
            raise ValueError("noise_double_sigma must be >= 0")


def scheduled_sample_prob(epoch: int, cfg: TrainConfig) -> float:
    """Model-sample probability: zero before the start epoch, then a linear
    ramp reaching the maximum on the ramp's last epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < cfg.sched_start or cfg.sched_max == 0.0:
        return 0.0
    progress = (epoch - cfg.sched_start + 1) / cfg.sched_ramp
    return cfg.sched_max * min(1.0, progress)


class Adam:
    """Adaptive-moment optimizer with global gradient-norm clipping."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, clip=5.0):
        if clip <= 0:
            raise ValueError("clip must be positive")
        self.beta1, self.beta2, self.eps, self.clip = beta1, beta2, eps, clip
        self.m = {}
        self.v = {}
        self.t = 0

    def reset_moments(self):
        self.m.clear()
        self.v.clear()
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads, lr: float) -> float:
        """In-place update; returns the pre-clip global gradient norm."""
        gs = {}
        sq = 0.0
        for name in params:
            g = grads[name]
            g = g.data if isinstance(g, Tensor) else np.asarray(g)
            gs[name] = g
            sq += float((g * g).sum())
        norm = math.sqrt(sq)
        factor = self.clip / norm if norm > self.clip else 1.0
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in gs.items():
            g = g * factor
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(params[name])
                v = np.zeros_like(params[name])
                self.m[name], self.v[name] = m, v
            else:
                v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return norm


@dataclass
class TrainResult:
    """Best-validation parameters plus the per-epoch metric history."""

    params: Dict[str, np.ndarray]
    metrics: List[dict]
    diverged: bool = False


def format_metrics_line(m: dict) -> str:
    return ("epoch %d stage %d train_loss %.6f val_loss %.6f val_token_acc %.4f"
            % (m["epoch"], m["stage"], m["train_loss"], m["val_loss"],
               m["val_token_acc"]))


def _copy_params(params):
    return {k: np.array(v) for k, v in params.items()}


def _ce_weight(cfg: TrainConfig, stage: int, epoch_in_stage: int, n_epochs: int) -> float:
    if not cfg.use_ctc:
        return 1.0
    if stage < FINAL_STAGE:
        return cfg.ce_weight_start
    if n_epochs <= 1:
        return 1.0
    frac = epoch_in_stage / (n_epochs - 1)
    return cfg.ce_weight_start + (1.0 - cfg.ce_weight_start) * frac


def _sampled_ce(tracked, cfg, enc, targets, rng, p_sample, smoothing):
    """Teacher-forced CE where each input token is swapped for the model's
    previous argmax with probability p_sample."""
    memory = md.prepare_memory(enc, md.attention_view(tracked, "att.mono"),
                               md.attention_view(tracked, "att.chunk"))
    state = md.initial_state(cfg, enc.shape[0])
    targets = list(targets)
    rows = []
    next_input = cfg.sos_id
    for i in range(len(targets) + 1):
        state.token = next_input
        noise = None
        if rng is not None and cfg.mono_noise_std > 0:
            noise = rng.normal(0.0, cfg.mono_noise_std, enc.shape[0])
        state, logits = md.decode_step(state, memory, tracked, cfg,
                                       training=True, noise=noise)
        rows.append(logits)
        if i < len(targets):
            next_input = targets[i]
            if p_sample > 0.0 and rng is not None and rng.random() < p_sample:
                next_input = int(np.argmax(logits.data))
    return losses.ce_loss(rows, targets + [cfg.eos_id], smoothing)


def _utterance_loss(params, scfg, utt, cfg, w_ce, p_sample, epoch):
    """Tape, loss, and gradients for one utterance at the current stage."""
    feats = utt.features
    policy = cfg.augment
    if policy is None and cfg.augment_auto:
        policy = dt.scaled_policy(feats.shape[1], feats.shape[0])
    if policy is not None:
        feats = dt.spec_augment(feats, policy,
                                [cfg.seed, 5, epoch, utt.utt_id])
    tape = Tape()
    tracked = md.track_params(tape, params)
    enc = md.encode(feats, scfg.encoder, tracked)
    rng = np.random.default_rng([cfg.seed, 6, epoch, utt.utt_id])
    ce = _sampled_ce(tracked, scfg, enc, utt.tokens, rng, p_sample,
                     cfg.label_smoothing)
    loss = ce
    if cfg.use_ctc and w_ce < 1.0 and losses.ctc_feasible(enc.shape[0], utt.tokens):
        ctc = losses.ctc_loss(md.ctc_logits(enc, tracked), utt.tokens)
        loss = losses.joint_loss(ce, ctc, w_ce)
    grads = nm.backward(tape, loss)
    steps = len(utt.tokens) + 1
    return float(loss.data) / steps, grads


def evaluate(params, scfg: md.ModelConfig, utts) -> Tuple[float, float]:
    """(mean per-token CE, token accuracy) under pure teacher forcing."""
    frozen = md.freeze_params(params)
    total_ce = 0.0
    hits = 0
    count = 0
    for utt in utts:
        rows = md.teacher_logits(frozen, scfg, utt.features, utt.tokens)
        targets = list(utt.tokens) + [scfg.eos_id]
        for row, y in zip(rows, targets):
            lp = nm._log_softmax_np(row.data)
            total_ce -= float(lp[y])
            hits += int(np.argmax(row.data) == y)
            count += 1
    if count == 0:
        raise ValueError("evaluate needs at least one utterance")
    return total_ce / count, hits / count


def _sequence_logprob(tracked, scfg, memory, enc_len, tokens):
    """Log-probability of a complete token sequence under teacher forcing."""
    state = md.initial_state(scfg, enc_len)
    total = Tensor(np.asarray(0.0))
    seq = list(tokens) + [scfg.eos_id]
    next_input = scfg.sos_id
    for tok in seq:
        state.token = next_input
        state, logits = md.decode_step(state, memory, tracked, scfg, training=True)
        lp = nm.log_softmax(logits)
        total = nm.add(total, nm.element(lp, int(tok)))
        next_input = int(tok)
    return total


def _mwer_utterance_loss(params, scfg, utt, cfg):
    """Expected word-error risk over the n-best list, mixed with CE.

    Returns None when decoding yields fewer than two distinct hypotheses or
    when every hypothesis has the same error count (zero gradient)."""
    from . import decoding as dec

    hyps = dec.beam_search(params, scfg, utt.features, beam_size=cfg.mwer_beam,
                           max_len=2 * len(utt.tokens) + 4)
    seqs = []
    for h in hyps:
        if h.tokens not in seqs:
            seqs.append(h.tokens)
    if len(seqs) < 2:
        return None
    ref = list(utt.tokens)
    errs = {s: dec.edit_distance(ref, s) for s in seqs}
    if len(set(errs.values())) < 2:
        return None

    tape = Tape()
    tracked = md.track_params(tape, params)
    enc = md.encode(utt.features, scfg.encoder, tracked)
    memory = md.prepare_memory(enc, md.attention_view(tracked, "att.mono"),
                               md.attention_view(tracked, "att.chunk"))
    beams = [(s, _sequence_logprob(tracked, scfg, memory, enc.shape[0], s))
             for s in seqs]
    risk = losses.mwer_loss(beams, ref)
    rng = np.random.default_rng([cfg.seed, 7, utt.utt_id])
    ce = _sampled_ce(tracked, scfg, enc, utt.tokens, rng, 0.0,
                     cfg.label_smoothing)
    loss = losses.joint_loss(ce, risk, cfg.mwer_ce_weight)
    grads = nm.backward(tape, loss)
    steps = len(utt.tokens) + 1
    return float(loss.data) / steps, grads


def train(corpus, model_cfg: md.ModelConfig, cfg: TrainConfig,
          params: Optional[Dict[str, np.ndarray]] = None, log=None) -> TrainResult:
    """Run stages start_stage..final, then optional sequence-risk epochs.

    Deterministic in cfg.seed. The result carries the weights of the
    final-architecture epoch with the best validation token accuracy
    (checkpoint selection; earliest epoch wins ties). A non-finite loss
    aborts the run with the last parameters that finished an epoch cleanly.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("corpus must be non-empty")
    train_utts, val_utts = dt.split_corpus(corpus, cfg.val_fraction, cfg.seed)
    if not train_utts or not val_utts:
        raise ValueError("corpus too small to split")
    if cfg.noise_double_sigma > 0:
        train_utts = dt.double_corpus(train_utts, cfg.noise_double_sigma,
                                      cfg.seed)

    scfg = stage_model_config(model_cfg, cfg.start_stage, cfg.initial_pool)
    if params is None:
        params = md.init_params(scfg, cfg.seed)
    params = _copy_params(params)
    opt = Adam(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.grad_clip)
    metrics = []
    last_good = _copy_params(params)
    best, best_acc = None, -1.0
    epoch = 0

    def run_epoch(stage_cfg, w_ce, p_sample, step_fn, step_state):
        rng = np.random.default_rng([cfg.seed, 4, epoch])
        order = rng.permutation(len(train_utts))
        total, seen = 0.0, 0
        acc, acc_n = {}, 0

        def apply(batch_grads, n):
            lr = step_state["lr"](step_state["step"])
            mean = {k: g / n for k, g in batch_grads.items()}
            opt.step(params, mean, lr)
            step_state["step"] += 1

        for idx in order:
            utt = train_utts[int(idx)]
            result = step_fn(utt, stage_cfg, w_ce, p_sample, step_state)
            if result is None:
                continue
            loss_val, grads = result
            if not math.isfinite(loss_val):
                return None
            for k, g in grads.items():
                acc[k] = acc[k] + g if k in acc else g
            acc_n += 1
            if acc_n == cfg.batch_size:
                apply(acc, acc_n)
                acc, acc_n = {}, 0
            total += loss_val
            seen += 1
        if acc_n:
            apply(acc, acc_n)
        return total / max(seen, 1)

    def ce_step(utt, stage_cfg, w_ce, p_sample, _):
        return _utterance_loss(params, stage_cfg, utt, cfg, w_ce, p_sample, epoch)

    def mwer_step(utt, stage_cfg, w_ce, p_sample, _):
        return _mwer_utterance_loss(params, stage_cfg, utt, cfg)

    for stage in range(cfg.start_stage, N_STAGES):
        if stage > cfg.start_stage:
            params = grow_encoder(params, model_cfg, stage, cfg.seed,
                                  cfg.initial_pool)
            scfg = stage_model_config(model_cfg, stage, cfg.initial_pool)
        n_epochs = cfg.final_epochs if stage == FINAL_STAGE else cfg.epochs_per_stage
        step_state = {"step": 0,
                      "lr": lambda s: warmup_lr(s, cfg.base_lr, cfg.warmup_steps)}
        for e in range(n_epochs):
            w_ce = _ce_weight(cfg, stage, e, n_epochs)
            p_sample = scheduled_sample_prob(epoch, cfg)
            train_loss = run_epoch(scfg, w_ce, p_sample, ce_step, step_state)
            if train_loss is None:
                return TrainResult(last_good, metrics, diverged=True)
            val_loss, val_acc = evaluate(params, scfg, val_utts)
            if not (math.isfinite(val_loss) and math.isfinite(train_loss)):
                return TrainResult(last_good, metrics, diverged=True)
            m = dict(epoch=epoch, stage=stage, train_loss=train_loss,
                     val_loss=val_loss, val_token_acc=val_acc)
            metrics.append(m)
            if log is not None:
                log(format_metrics_line(m))
            last_good = _copy_params(params)
            if stage == FINAL_STAGE and val_acc > best_acc:
                best, best_acc = _copy_params(params), val_acc
            epoch += 1

    for e in range(cfg.mwer_epochs):
        step_state = {"step": 0, "lr": lambda s: cfg.mwer_lr}
        train_loss = run_epoch(scfg, 1.0, 0.0, mwer_step, step_state)
        if train_loss is None:
            return TrainResult(last_good, metrics, diverged=True)
        val_loss, val_acc = evaluate(params, scfg, val_utts)
        if not (math.isfinite(val_loss) and math.isfinite(train_loss)):
            return TrainResult(last_good, metrics, diverged=True)
        m = dict(epoch=epoch, stage=MWER_STAGE, train_loss=train_loss,
                 val_loss=val_loss, val_token_acc=val_acc)
        metrics.append(m)
        if log is not None:
            log(format_metrics_line(m))
        last_good = _copy_params(params)
        if val_acc > best_acc:
            best, best_acc = _copy_params(params), val_acc
        epoch += 1

    return TrainResult(best if best is not None else params, metrics,
                       diverged=False)
