"""Pipeline front door: subcommands over corpora, checkpoints, and LMs.

Exit codes: 0 success, 1 validation failure, 2 training divergence,
3 file I/O or file-format failure. Every command is deterministic in its
flags, input files, and the seed recorded into checkpoint provenance.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import struct
import sys
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import compression as cp
from . import data as dt
from . import decoding as dec
from . import model as md
from . import training as tr

CKPT_MAGIC = b"SACK"
CKPT_VERSION = 1
_TAG_F64 = 1


class CliError(Exception):
    """Failure with a chosen process exit code."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

CONFIG_DEFAULTS: Dict[str, object] = {
    # model shape
    "input_size": 8,
    "vocab_size": 16,
    "cell_size": 32,
    "directionality": "uni",
    "dec_cell_size": 32,
    "attn_size": 32,
    "embed_size": 16,
    "head_hidden": 32,
    "chunk_size": 2,
    "energy_variant": "modified",
    "energy_uses_updated_state": False,
    "mono_noise_std": 1.0,
    # optimization
    "seed": 17,
    "base_lr": 3e-3,
    "warmup_steps": 150,
    "batch_size": 1,
    "epochs_per_stage": 1,
    "final_epochs": 20,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_eps": 1e-8,
    "grad_clip": 5.0,
    "label_smoothing": 0.0,
    "use_ctc": True,
    "ce_weight_start": 0.8,
    "augment_auto": True,
    "noise_double_sigma": 0.1,
    "sched_start": 7,
    "sched_ramp": 4,
    "sched_max": 0.25,
    "start_stage": 0,
    "initial_pool": 32,
    "val_fraction": 0.05,
    "mwer_epochs": 0,
    "mwer_beam": 4,
    "mwer_ce_weight": 0.6,
    "mwer_lr": 5e-4,
    # low-rank retraining
    "lra_ratio": 4.0,
    "lra_edge_ratio": 2.0,
    "lra_min_dim": 64,
    "lra_period": 0,
    "lra_epochs": 2,
    "lra_reset_moments": False,
    # decoding
    "beam_size": 8,
    "len_bonus": 0.0,
}


def _coerce(key: str, value: object) -> object:
    want = type(CONFIG_DEFAULTS[key])
    if isinstance(value, want):
        return value
    if want is bool:
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ValueError("config key %s wants true/false, got %r" % (key, value))
    if want is float and isinstance(value, (int, str)):
        return float(value)
    if want is int:
        as_float = float(value)
        if as_float != int(as_float):
            raise ValueError("config key %s wants an integer, got %r" % (key, value))
        return int(as_float)
    if want is str:
        return str(value)
    raise ValueError("config key %s has unsupported value %r" % (key, value))


def run_config(file_values: Optional[Dict[str, object]] = None,
               flag_values: Optional[Dict[str, object]] = None,
               log=None) -> Dict[str, object]:
    """Defaults overlaid with config-file values, then CLI flag values.

    Unknown keys are rejected; every override is logged with its source.
    The result is validated by constructing the model and training configs.
    """
    cfg = dict(CONFIG_DEFAULTS)
    for source, values in (("file", file_values), ("flag", flag_values)):
        for key, value in (values or {}).items():
            if key not in CONFIG_DEFAULTS:
                raise ValueError("unknown config key %r" % key)
            cfg[key] = _coerce(key, value)
            if log is not None:
                log("config %s %s source=%s" % (key, cfg[key], source))
    model_config_of(cfg)
    train_config_of(cfg)
    if cfg["lra_ratio"] <= 1.0 or cfg["lra_edge_ratio"] <= 1.0:
        raise ValueError("lra ratios must exceed 1")
    if cfg["lra_min_dim"] < 2 or cfg["lra_period"] < 0 or cfg["lra_epochs"] < 1:
        raise ValueError("bad low-rank retraining settings")
    if cfg["beam_size"] < 1:
        raise ValueError("beam_size must be >= 1")
    return cfg


def config_hash(cfg: Dict[str, object]) -> str:
    blob = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def model_config_of(cfg: Dict[str, object]) -> md.ModelConfig:
    enc = md.EncoderConfig(layer_count=2, cell_size=cfg["cell_size"],
                           directionality=cfg["directionality"],
                           pool_factors=(cfg["initial_pool"],))
    return md.ModelConfig(input_size=cfg["input_size"],
                          vocab_size=cfg["vocab_size"], encoder=enc,
                          dec_cell_size=cfg["dec_cell_size"],
                          attn_size=cfg["attn_size"],
                          embed_size=cfg["embed_size"],
                          head_hidden=cfg["head_hidden"],
                          chunk_size=cfg["chunk_size"],
                          energy_variant=cfg["energy_variant"],
                          energy_uses_updated_state=cfg["energy_uses_updated_state"],
                          mono_noise_std=cfg["mono_noise_std"])


def train_config_of(cfg: Dict[str, object]) -> tr.TrainConfig:
    keys = ("seed", "base_lr", "warmup_steps", "batch_size",
            "epochs_per_stage", "final_epochs", "beta1", "beta2", "adam_eps",
            "grad_clip", "label_smoothing", "use_ctc", "ce_weight_start",
            "augment_auto", "noise_double_sigma", "sched_start", "sched_ramp",
            "sched_max", "start_stage", "initial_pool", "val_fraction",
            "mwer_epochs", "mwer_beam", "mwer_ce_weight", "mwer_lr")
    return tr.TrainConfig(**{k: cfg[k] for k in keys})


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _write_f64_records(params: Dict[str, np.ndarray]) -> bytes:
    chunks = []
    for name in sorted(params):
        w = np.asarray(params[name], dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BB", _TAG_F64, w.ndim))
        for extent in w.shape:
            chunks.append(struct.pack("<I", extent))
        chunks.append(w.tobytes(order="C"))
    return b"".join(chunks)


def _read_f64_records(blob: bytes) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise ValueError("truncated checkpoint tensor section")
        piece = blob[off:off + n]
        off += n
        return piece

    while off < len(blob):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2))
        if tag != _TAG_F64:
            raise ValueError("unexpected tensor dtype tag %d" % tag)
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        w = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()
        if name in out:
            raise ValueError("duplicate tensor %s" % name)
        out[name] = w
    return out


def save_checkpoint(path: str, params, model_cfg: md.ModelConfig, stage: int,
                    seed: int, cfg_hash: str, epoch: int = 0,
                    initial_pool: int = 32, quantized: bool = False,
                    opt_state: Optional[dict] = None) -> None:
    """Versioned binary checkpoint: header first, tensors after.

    `params` holds float64 arrays, or QuantTensor values when `quantized`.
    """
    scfg = tr.stage_model_config(model_cfg, stage, initial_pool)
    header = {
        "stage": stage,
        "epoch": epoch,
        "seed": seed,
        "config_hash": cfg_hash,
        "quantized": bool(quantized),
        "initial_pool": initial_pool,
        "model": {
            "input_size": model_cfg.input_size,
            "vocab_size": model_cfg.vocab_size,
            "cell_size": model_cfg.encoder.cell_size,
            "directionality": model_cfg.encoder.directionality,
            "dec_cell_size": model_cfg.dec_cell_size,
            "attn_size": model_cfg.attn_size,
            "embed_size": model_cfg.embed_size,
            "head_hidden": model_cfg.head_hidden,
            "chunk_size": model_cfg.chunk_size,
            "energy_variant": model_cfg.energy_variant,
            "energy_uses_updated_state": model_cfg.energy_uses_updated_state,
            "mono_noise_std": model_cfg.mono_noise_std,
        },
        "stage_layers": scfg.encoder.layer_count,
        "stage_pool_factors": list(scfg.encoder.pool_factors),
        "opt_t": None if opt_state is None else int(opt_state["t"]),
    }
    if quantized:
        payload = cp.write_quantized(params)
    else:
        tensors = dict(params)
        if opt_state is not None:
            for name, w in opt_state["m"].items():
                tensors["opt.m." + name] = w
            for name, w in opt_state["v"].items():
                tensors["opt.v." + name] = w
        payload = _write_f64_records(tensors)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", CKPT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path: str) -> Tuple[Dict[str, object], dict, Optional[dict]]:
    """(tensors, header, optimizer state); the version gate runs before any
    tensor bytes are parsed."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 10 or blob[:4] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    (version,) = struct.unpack("<H", blob[4:6])
    if version != CKPT_VERSION:
        raise ValueError("unsupported checkpoint version %d" % version)
    (header_len,) = struct.unpack("<I", blob[6:10])
    if 10 + header_len > len(blob):
        raise ValueError("truncated checkpoint header")
    header = json.loads(blob[10:10 + header_len].decode("utf-8"))
    payload = blob[10 + header_len:]
    if header["quantized"]:
        return cp.read_quantized(payload), header, None
    tensors = _read_f64_records(payload)
    opt_state = None
    if header.get("opt_t") is not None:
        m = {k[len("opt.m."):]: tensors.pop(k)
             for k in list(tensors) if k.startswith("opt.m.")}
        v = {k[len("opt.v."):]: tensors.pop(k)
             for k in list(tensors) if k.startswith("opt.v.")}
        opt_state = {"t": header["opt_t"], "m": m, "v": v}
    return tensors, header, opt_state


def checkpoint_model_config(header: dict) -> md.ModelConfig:
    """Rebuild the base model configuration recorded in a checkpoint."""
    m = header["model"]
    cfg = {
        "input_size": m["input_size"], "vocab_size": m["vocab_size"],
        "cell_size": m["cell_size"], "directionality": m["directionality"],
        "dec_cell_size": m["dec_cell_size"], "attn_size": m["attn_size"],
        "embed_size": m["embed_size"], "head_hidden": m["head_hidden"],
        "chunk_size": m["chunk_size"], "energy_variant": m["energy_variant"],
        "energy_uses_updated_state": m["energy_uses_updated_state"],
        "mono_noise_std": m["mono_noise_std"],
        "initial_pool": header["initial_pool"],
    }
    merged = dict(CONFIG_DEFAULTS)
    merged.update(cfg)
    return model_config_of(merged)


def checkpoint_decode_params(path: str):
    """(forward-ready params, stage config, header) for decoding commands:
    dequantizes and multiplies factored pairs back as needed."""
    tensors, header, _ = load_checkpoint(path)
    if header["quantized"]:
        tensors = cp.dequantize_params(tensors)
    if any(name.endswith(cp.LRA_U) for name in tensors):
        tensors = cp.materialize_lra(tensors)
    base = checkpoint_model_config(header)
    scfg = tr.stage_model_config(base, header["stage"], header["initial_pool"])
    return tensors, scfg, header


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _load_file(kind: str, path: str, parser):
    try:
        return parser(path)
    except OSError as e:
        raise CliError(3, "cannot read %s %s: %s" % (kind, path, e))
    except ValueError as e:
        raise CliError(3, "bad %s %s: %s" % (kind, path, e))


def _load_corpus(path: str):
    return _load_file("corpus", path, dt.load_corpus)


def _load_config_sets(args, log) -> Dict[str, object]:
    file_values = None
    if getattr(args, "config", None):
        def read_json(path):
            with open(path) as fh:
                doc = json.load(fh)
            if not isinstance(doc, dict):
                raise ValueError("config must be a JSON object")
            return doc
        file_values = _load_file("config", args.config, read_json)
    flag_values = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValueError("--set wants key=value, got %r" % item)
        key, value = item.split("=", 1)
        flag_values[key] = value
    return run_config(file_values, flag_values, log)


def _write_text(path: str, text: str) -> None:
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as e:
        raise CliError(3, "cannot write %s: %s" % (path, e))


def cmd_gen_data(args) -> int:
    utts = dt.gen_toy_corpus(args.seed, args.vocab, args.utts,
                             (args.frames_lo, args.frames_hi), args.dim,
                             tokens_per_utt=(args.tokens_lo, args.tokens_hi),
                             noise_std=args.noise)
    try:
        dt.save_corpus(utts, args.out)
    except OSError as e:
        raise CliError(3, "cannot write %s: %s" % (args.out, e))
    print("gen-data wrote %d utterances to %s" % (len(utts), args.out))
    return 0


def cmd_train(args) -> int:
    log_lines: List[str] = []
    cfg = _load_config_sets(args, log_lines.append)
    for line in log_lines:
        print(line, file=sys.stderr)
    corpus = _load_corpus(args.data)
    mcfg = model_config_of(cfg)
    tcfg = train_config_of(cfg)

    params = None
    epoch_base = 0
    if args.resume:
        tensors, header, _ = _load_file("checkpoint", args.resume,
                                        load_checkpoint)
        if header["quantized"]:
            raise ValueError("cannot resume from a quantized checkpoint")
        params = tensors
        epoch_base = int(header["epoch"])
        tcfg = tr.TrainConfig(**{**tcfg.__dict__,
                                 "start_stage": int(header["stage"])})

    metrics_fh = open(args.metrics, "w") if args.metrics else None

    def emit(m):
        line = tr.format_metrics_line(m)
        print(line)
        if metrics_fh is not None:
            metrics_fh.write(line + "\n")

    try:
        res = tr.train(corpus, mcfg, tcfg, params=params)
        for m in res.metrics:
            emit({**m, "epoch": m["epoch"] + epoch_base})
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if res.diverged:
        stage = (min(res.metrics[-1]["stage"], tr.FINAL_STAGE)
                 if res.metrics else tcfg.start_stage)
    else:
        stage = tr.FINAL_STAGE
    save_checkpoint(args.out, res.params, mcfg, stage, tcfg.seed,
                    config_hash(cfg), epoch=epoch_base + len(res.metrics),
                    initial_pool=tcfg.initial_pool)
    if res.diverged:
        print("training diverged; wrote last good checkpoint", file=sys.stderr)
        return 2
    best = max((m["val_token_acc"] for m in res.metrics), default=float("nan"))
    print("train wrote %s best_val_token_acc %.4f" % (args.out, best))
    return 0


def cmd_compress(args) -> int:
    log_lines: List[str] = []
    cfg = _load_config_sets(args, log_lines.append)
    for line in log_lines:
        print(line, file=sys.stderr)
    corpus = _load_corpus(args.data)
    tensors, header, _ = _load_file("checkpoint", args.ckpt, load_checkpoint)
    if header["quantized"]:
        raise ValueError("compress wants a float checkpoint")
    if any(name.endswith(cp.LRA_U) for name in tensors):
        raise ValueError("checkpoint is already factored")
    base = checkpoint_model_config(header)
    tcfg = tr.TrainConfig(**{**train_config_of(cfg).__dict__,
                             "final_epochs": cfg["lra_epochs"]})

    train_utts, _ = dt.split_corpus(corpus, tcfg.val_fraction, tcfg.seed)
    n_examples = len(train_utts) * (2 if tcfg.noise_double_sigma > 0 else 1)
    period = cfg["lra_period"] or cp.sub_epoch_period(n_examples,
                                                      tcfg.batch_size)
    plan = cp.plan_for(tensors, period, min_dim=cfg["lra_min_dim"],
                       ratio=cfg["lra_ratio"], edge_ratio=cfg["lra_edge_ratio"])
    if not plan.entries:
        raise ValueError("no tensor is large enough to factor; lower lra_min_dim")

    res = cp.hyper_lra_train(tensors, base, plan, corpus, tcfg, log=print,
                             reset_moments_on_snap=cfg["lra_reset_moments"])
    fact = cp.finalize_lra(res.params, plan)
    save_checkpoint(args.out, fact, base, header["stage"], tcfg.seed,
                    config_hash(cfg), epoch=header["epoch"],
                    initial_pool=header["initial_pool"])
    if res.diverged:
        print("retraining diverged; wrote last good weights", file=sys.stderr)
        return 2
    before = sum(int(np.prod((e.rows, e.cols))) for e in plan.entries)
    after = sum(e.rank * (e.rows + e.cols) for e in plan.entries)
    print("compress wrote %s entries %d period %d snaps %d "
          "planned_ratio %.2f" % (args.out, len(plan.entries), plan.period,
                                  len(res.snap_losses), before / after))
    return 0


def cmd_quantize(args) -> int:
    tensors, header, _ = _load_file("checkpoint", args.ckpt, load_checkpoint)
    if header["quantized"]:
        raise ValueError("checkpoint is already quantized")
    qparams = cp.quantize_params(tensors)
    base = checkpoint_model_config(header)
    save_checkpoint(args.out, qparams, base, header["stage"], header["seed"],
                    header["config_hash"], epoch=header["epoch"],
                    initial_pool=header["initial_pool"], quantized=True)
    n_values = sum(t.q.size for t in qparams.values())
    payload = sum(cp.quant_record_size(name, len(t.shape), t.q.size)
                  for name, t in qparams.items())
    print("quantize wrote %s tensors %d values %d payload_bytes %d "
          "float32_reduction %.2f" % (args.out, len(qparams), n_values,
                                      payload, 4.0 * n_values / payload))
    return 0


def _read_lines(kind: str, path: str) -> List[str]:
    def reader(p):
        with open(p) as fh:
            return [line.strip() for line in fh if line.strip()]
    return _load_file(kind, path, reader)


def cmd_build_lm(args) -> int:
    entities = _read_lines("entities", args.entities)
    patterns = _read_lines("patterns", args.patterns)
    lm = dec.build_class_lm(entities, patterns, order=args.order, log=print)
    _write_text(args.out, dec.arpa_serialize(lm))
    print("build-lm wrote %s order %d" % (args.out, args.order))
    return 0


def _parse_lm_flag(item: str) -> Tuple[str, float]:
    path, sep, alpha = item.rpartition(":")
    if not sep or not path:
        raise ValueError("--lm wants path:alpha, got %r" % item)
    return path, float(alpha)


def cmd_decode(args) -> int:
    params, scfg, _ = _load_file("checkpoint", args.ckpt,
                                 checkpoint_decode_params)
    corpus = _load_corpus(args.data)
    def read_arpa(path):
        with open(path) as fh:
            return dec.arpa_parse(fh.read())

    lms = []
    for item in args.lm or []:
        path, alpha = _parse_lm_flag(item)
        lms.append((_load_file("language model", path, read_arpa), alpha))
    lines = []
    for utt in corpus:
        hyps = dec.beam_search(params, scfg, utt.features,
                               beam_size=args.beam, lms=lms,
                               len_bonus=args.len_bonus)
        lines.extend(dec.format_nbest(utt.utt_id, hyps[:args.nbest]))
    _write_text(args.out, "\n".join(lines) + "\n")
    print("decode wrote %d hypotheses for %d utterances to %s"
          % (len(lines), len(corpus), args.out))
    return 0


def _reference_words(path: str) -> Dict[int, List[str]]:
    """utt id -> words, from a corpus file or from rank-1 n-best lines."""
    with open(path) as fh:
        first = fh.readline()
    if first.startswith("utt "):
        return {utt.utt_id: [dt.token_word(t) for t in utt.tokens]
                for utt in dt.load_corpus(path)}
    out: Dict[int, List[str]] = {}
    for line in _read_lines("hypothesis file", path):
        fields = line.split()
        if len(fields) < 3:
            raise ValueError("bad n-best line %r" % line)
        utt_id, rank = int(fields[0]), int(fields[1])
        if rank == 1:
            out[utt_id] = fields[3:]
    return out


def cmd_eval(args) -> int:
    ref = _load_file("reference", args.ref, _reference_words)
    hyp = _load_file("hypothesis", args.hyp, _reference_words)
    missing = sorted(set(ref) - set(hyp))
    if missing:
        raise ValueError("hypotheses missing for utterances %s" % missing[:5])
    errors = 0
    ref_words = 0
    for utt_id, words in sorted(ref.items()):
        errors += dec.edit_distance(words, hyp[utt_id])
        ref_words += len(words)
    if ref_words == 0:
        raise ValueError("empty reference")
    print("wer %.3f errors %d ref_words %d utterances %d"
          % (errors / ref_words, errors, ref_words, len(ref)))
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(1, message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="streamasr", description=__doc__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="synthesize a toy corpus")
    p.add_argument("--seed", type=int, default=17)
    p.add_argument("--vocab", type=int, default=16)
    p.add_argument("--utts", type=int, default=500)
    p.add_argument("--frames-lo", type=int, default=12)
    p.add_argument("--frames-hi", type=int, default=20)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--tokens-lo", type=int, default=3)
    p.add_argument("--tokens-hi", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="staged training run")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.add_argument("--resume")

    p = sub.add_parser("compress", help="low-rank retrain and factor")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("quantize", help="8-bit quantize a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("build-lm", help="class LM from entities x patterns")
    p.add_argument("--entities", required=True)
    p.add_argument("--patterns", required=True)
    p.add_argument("--order", type=int, default=3)
    p.add_argument("--out", required=True)

    p = sub.add_parser("decode", help="beam search with optional fusion")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--beam", type=int, default=8)
    p.add_argument("--nbest", type=int, default=1)
    p.add_argument("--len-bonus", type=float, default=0.0)
    p.add_argument("--lm", action="append", metavar="PATH:ALPHA")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="word error rate of hypotheses")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "compress": cmd_compress,
    "quantize": cmd_quantize,
    "build-lm": cmd_build_lm,
    "decode": cmd_decode,
    "eval": cmd_eval,
}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return _COMMANDS[args.cmd](args)
    except CliError as e:
        print("error: %s" % e, file=sys.stderr)
        return e.code
    except SystemExit as e:
        return int(e.code or 0)
    except ValueError as e:
        print("error: %s" % e, file=sys.stderr)
        return 1
    except OSError as e:
        print("error: %s" % e, file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
