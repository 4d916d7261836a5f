"""Beam decoding with n-gram shallow fusion, ARPA language models, and
word-error scoring."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import model as md
from . import numerics as nm
from .numerics import Tensor, _log_softmax_np


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def edit_distance(ref, hyp):
    """Levenshtein distance (substitutions + insertions + deletions)."""
    ref = list(ref)
    hyp = list(hyp)
    prev = np.arange(len(hyp) + 1)
    for i, r in enumerate(ref, start=1):
        cur = np.empty(len(hyp) + 1, dtype=np.int64)
        cur[0] = i
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return int(prev[-1])


def wer(ref, hyp):
    """Word error rate: edit distance over words divided by reference length.

    May exceed 1 when the hypothesis inserts many words.
    """
    ref = list(ref)
    if not ref:
        raise ValueError("wer needs a non-empty reference")
    return edit_distance(ref, hyp) / len(ref)


# ---------------------------------------------------------------------------
# ARPA backoff language models
# ---------------------------------------------------------------------------

_LN10 = math.log(10.0)
_OOV_FLOOR = math.log(1e-10)
_SENT_START = "<s>"
_SENT_END = "</s>"
_UNK = "<unk>"


@dataclass
class ArpaLm:
    """Backoff n-gram model; log10 values kept exactly as parsed.

    `tables[n]` maps an n-word tuple to (log10 prob, log10 backoff or None).
    """

    order: int
    tables: Dict[int, Dict[Tuple[str, ...], Tuple[float, Optional[float]]]]
    vocab: frozenset

    def __eq__(self, other):
        if not isinstance(other, ArpaLm):
            return NotImplemented
        return (self.order == other.order and self.tables == other.tables
                and self.vocab == other.vocab)


def arpa_parse(text: str) -> ArpaLm:
    """Parse ARPA text; malformed input is rejected with its line number."""
    lines = text.splitlines()
    pos = 0

    def fail(line_no, why):
        raise ValueError("line %d: %s" % (line_no + 1, why))

    while pos < len(lines) and lines[pos].strip() == "":
        pos += 1
    if pos >= len(lines) or lines[pos].strip() != "\\data\\":
        fail(pos if pos < len(lines) else 0, "expected \\data\\ header")
    pos += 1

    counts = {}
    while pos < len(lines) and lines[pos].strip() != "":
        fields = lines[pos].strip().split("=")
        if len(fields) != 2 or not fields[0].startswith("ngram "):
            fail(pos, "expected 'ngram N=count'")
        try:
            n = int(fields[0][len("ngram "):])
            counts[n] = int(fields[1])
        except ValueError:
            fail(pos, "expected 'ngram N=count'")
        pos += 1
    if not counts:
        fail(pos - 1, "no ngram counts in \\data\\ section")
    order = max(counts)
    if sorted(counts) != list(range(1, order + 1)):
        fail(pos - 1, "ngram counts must cover orders 1..N")

    tables = {n: {} for n in range(1, order + 1)}
    for n in range(1, order + 1):
        while pos < len(lines) and lines[pos].strip() == "":
            pos += 1
        section = "\\%d-grams:" % n
        if pos >= len(lines) or lines[pos].strip() != section:
            fail(min(pos, len(lines) - 1), "expected %s section" % section)
        section_line = pos
        pos += 1
        while pos < len(lines) and lines[pos].strip() not in ("", "\\end\\") \
                and not lines[pos].strip().startswith("\\"):
            fields = lines[pos].strip().split()
            if len(fields) not in (n + 1, n + 2):
                fail(pos, "expected 'logprob %d words [backoff]'" % n)
            try:
                logp = float(fields[0])
            except ValueError:
                fail(pos, "bad log probability %r" % fields[0])
            words = tuple(fields[1:n + 1])
            backoff = None
            if len(fields) == n + 2:
                try:
                    backoff = float(fields[n + 1])
                except ValueError:
                    fail(pos, "bad backoff weight %r" % fields[n + 1])
            if words in tables[n]:
                fail(pos, "duplicate %d-gram %s" % (n, " ".join(words)))
            if n > 1 and words[:-1] not in tables[n - 1]:
                fail(pos, "dangling context %s" % " ".join(words[:-1]))
            tables[n][words] = (logp, backoff)
            pos += 1
        if len(tables[n]) != counts[n]:
            fail(section_line, "%s section has %d entries, header declares %d"
                 % (section, len(tables[n]), counts[n]))

    while pos < len(lines) and lines[pos].strip() == "":
        pos += 1
    if pos >= len(lines) or lines[pos].strip() != "\\end\\":
        fail(min(pos, len(lines) - 1), "expected \\end\\")
    for extra in range(pos + 1, len(lines)):
        if lines[extra].strip() != "":
            fail(extra, "content after \\end\\")

    vocab = frozenset(w for (w,) in tables[1])
    return ArpaLm(order=order, tables=tables, vocab=vocab)


def _format_log10(v: float) -> str:
    """Shortest decimal that parses back to the same float."""
    return repr(float(v))


def arpa_serialize(lm: ArpaLm) -> str:
    """ARPA text for a model; parse(serialize(lm)) == lm."""
    out = ["\\data\\"]
    for n in range(1, lm.order + 1):
        out.append("ngram %d=%d" % (n, len(lm.tables[n])))
    for n in range(1, lm.order + 1):
        out.append("")
        out.append("\\%d-grams:" % n)
        for words in sorted(lm.tables[n]):
            logp, backoff = lm.tables[n][words]
            line = "%s %s" % (_format_log10(logp), " ".join(words))
            if backoff is not None:
                line += " %s" % _format_log10(backoff)
            out.append(line)
    out.append("")
    out.append("\\end\\")
    return "\n".join(out) + "\n"


def _logprob10(lm: ArpaLm, token: str, context: Tuple[str, ...]) -> float:
    entry = lm.tables[len(context) + 1].get(context + (token,))
    if entry is not None:
        return entry[0]
    if not context:
        unk = lm.tables[1].get((_UNK,))
        if unk is not None:
            return unk[0]
        return _OOV_FLOOR / _LN10
    ctx_entry = lm.tables[len(context)].get(context)
    bow = 0.0
    if ctx_entry is not None and ctx_entry[1] is not None:
        bow = ctx_entry[1]
    return bow + _logprob10(lm, token, context[1:])


def lm_logprob(lm: ArpaLm, token: str, context: Sequence[str] = ()) -> float:
    """Natural-log probability of `token` after `context`, Katz backoff.

    The longest stored context match wins; shorter matches add the stored
    backoff weights. Contexts longer than order-1 are truncated from the
    left. Out-of-vocabulary tokens score as <unk> when present, else a
    fixed floor.
    """
    context = tuple(context)
    if len(context) >= lm.order:
        context = context[len(context) - lm.order + 1:]
    if token not in lm.vocab:
        unk = lm.tables[1].get((_UNK,))
        if unk is not None:
            return _logprob10(lm, _UNK, context) * _LN10
        return _OOV_FLOOR
    return _logprob10(lm, token, context) * _LN10


# ---------------------------------------------------------------------------
# N-gram estimation and class-grammar synthesis
# ---------------------------------------------------------------------------


def estimate_ngram(sentences: Sequence[Sequence[str]], order: int = 3,
                   delta: float = 0.01) -> ArpaLm:
    """Add-delta n-gram estimate over tokenized sentences.

    Stores observed n-grams only; the leftover smoothing mass becomes each
    context's backoff weight, so probabilities over the full vocabulary sum
    to one at every order.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    if delta <= 0:
        raise ValueError("delta must be positive")
    sentences = [list(s) for s in sentences]
    if not sentences or any(not s for s in sentences):
        raise ValueError("sentences must be non-empty")

    words = sorted({w for s in sentences for w in s})
    for w in words:
        if w in (_SENT_START, _SENT_END, _UNK):
            raise ValueError("reserved word %r in sentences" % w)
    predictable = words + [_SENT_END, _UNK]
    v_size = len(predictable)

    counts = {n: {} for n in range(1, order + 1)}
    for s in sentences:
        padded = [_SENT_START] + s + [_SENT_END]
        for n in range(1, order + 1):
            for i in range(len(padded) - n + 1):
                gram = tuple(padded[i:i + n])
                if n == 1 and gram == (_SENT_START,):
                    continue
                counts[n][gram] = counts[n].get(gram, 0) + 1

    tables = {n: {} for n in range(1, order + 1)}
    total = sum(counts[1].values())
    for w in predictable:
        c = counts[1].get((w,), 0)
        tables[1][(w,)] = (math.log10((c + delta) / (total + delta * v_size)), None)
    tables[1][(_SENT_START,)] = (-99.0, None)

    lm = ArpaLm(order=order, tables=tables, vocab=frozenset())
    for n in range(2, order + 1):
        ctx_totals = {}
        ctx_grams = {}
        for gram, c in counts[n].items():
            ctx = gram[:-1]
            ctx_totals[ctx] = ctx_totals.get(ctx, 0) + c
            ctx_grams.setdefault(ctx, []).append((gram[-1], c))
        for ctx in sorted(ctx_grams):
            denom = ctx_totals[ctx] + delta * v_size
            seen_mass = 0.0
            lower_mass = 0.0
            for w, c in ctx_grams[ctx]:
                p = (c + delta) / denom
                tables[n][ctx + (w,)] = (math.log10(p), None)
                seen_mass += p
                lower_mass += 10.0 ** _logprob10(lm, w, ctx[1:])
            bow = math.log10((1.0 - seen_mass) / (1.0 - lower_mass))
            logp, _ = tables[n - 1][ctx]
            tables[n - 1][ctx] = (logp, bow)

    return ArpaLm(order=order, tables=tables,
                  vocab=frozenset(w for (w,) in tables[1]))


_SLOT = "@slot"


def expand_patterns(entities: Sequence[str], patterns: Sequence[str]) -> List[List[str]]:
    """All entity-in-pattern utterances as word lists; |entities| x |patterns|."""
    entities = list(entities)
    patterns = list(patterns)
    if not entities or not patterns:
        raise ValueError("entities and patterns must be non-empty")
    split_patterns = []
    for p in patterns:
        fields = p.split()
        if fields.count(_SLOT) != 1:
            raise ValueError("pattern %r must contain exactly one %s" % (p, _SLOT))
        at = fields.index(_SLOT)
        split_patterns.append((fields[:at], fields[at + 1:]))
    out = []
    for head, tail in split_patterns:
        for e in entities:
            out.append(head + e.split() + tail)
    return out


def build_class_lm(entities: Sequence[str], patterns: Sequence[str],
                   order: int = 3, log=None) -> ArpaLm:
    """Estimate an n-gram model over every entity-in-pattern utterance.

    `log`, when given, receives one machine-parseable line reporting the
    synthesized utterance count and the wall-clock build time.
    """
    start = time.perf_counter()
    sentences = expand_patterns(entities, patterns)
    lm = estimate_ngram(sentences, order=order)
    elapsed = time.perf_counter() - start
    if log is not None:
        log("class-lm utterances %d build_seconds %.3f" % (len(sentences), elapsed))
    return lm


# ---------------------------------------------------------------------------
# Beam search with shallow fusion
# ---------------------------------------------------------------------------


@dataclass
class BeamHyp:
    """One hypothesis: token prefix, fused score, decoder state, history.

    `us` is the monotonic scan position after each emitted symbol; `trace`
    holds (model log-prob, per-LM log-prob tuple) pairs per emitted symbol,
    so the total score can be re-derived from parts. Finished hypotheses
    are never extended.
    """

    tokens: Tuple[int, ...] = ()
    score: float = 0.0
    state: Optional[md.DecoderState] = None
    finished: bool = False
    ended_by: str = ""
    us: Tuple[int, ...] = ()
    trace: Tuple[Tuple[float, Tuple[float, ...]], ...] = ()

    def sort_key(self):
        return (-self.score, self.tokens)


def decompose_score(hyp: BeamHyp, lms, len_bonus: float = 0.0) -> float:
    """Recompute a hypothesis score from its per-step trace."""
    total = 0.0
    for model_lp, lm_lps in hyp.trace:
        total += model_lp
        for (_, alpha), lm_lp in zip(lms, lm_lps):
            total += alpha * lm_lp
    n_tokens = len(hyp.tokens)
    return total + len_bonus * n_tokens


def _lm_scores(lms, contexts, word):
    """Per-LM log-probs of `word`; skipped (0.0) for zero-weight LMs."""
    out = []
    for (lm, alpha), ctx in zip(lms, contexts):
        out.append(lm_logprob(lm, word, ctx) if alpha != 0.0 else 0.0)
    return tuple(out)


def beam_search(params, cfg, features, beam_size: int = 12, lms=(),
                max_len: Optional[int] = None, len_bonus: float = 0.0) -> List[BeamHyp]:
    """N-best decoding; per-step score is the model log-prob plus weighted
    LM log-probs of the same symbol.

    `lms` is a sequence of (ArpaLm, weight) pairs; a zero weight adds
    nothing, bit for bit. A hypothesis finishes when it emits the
    end-of-sequence symbol (LM end-of-sentence scored too), when attention
    exhausts the input, or at the length cap (no end score in either).
    Ties order lexicographically by token sequence.
    """
    from .data import token_word

    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    lms = list(lms)
    feats = features.data if isinstance(features, Tensor) else np.asarray(features)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ValueError("features must be a non-empty frames x dims matrix")

    frozen = md.freeze_params(params)
    enc = md.encode(Tensor(feats), cfg.encoder, frozen)
    memory = md.prepare_memory(enc, md.attention_view(frozen, "att.mono"),
                               md.attention_view(frozen, "att.chunk"))
    enc_len = enc.shape[0]
    cap = max_len if max_len is not None else 2 * enc_len + 8
    if cap < 1:
        raise ValueError("length cap must be >= 1")

    start = BeamHyp(state=md.initial_state(cfg, enc_len))
    live = [start]
    finished = []
    while live:
        candidates = []
        for hyp in live:
            prev_tok = hyp.tokens[-1] if hyp.tokens else cfg.sos_id
            stepped = replace(hyp.state, token=prev_tok)
            new_state, logits = md.decode_step(stepped, memory, frozen, cfg)
            if new_state is None:
                finished.append(replace(hyp, finished=True, ended_by="exhausted"))
                continue
            lp = _log_softmax_np(logits.data)
            contexts = [("<s>",) + tuple(token_word(t) for t in hyp.tokens)] * len(lms)
            for tok in range(cfg.vocab_size):
                lm_lps = _lm_scores(lms, contexts, token_word(tok))
                score = hyp.score + float(lp[tok]) + len_bonus
                for (_, alpha), lm_lp in zip(lms, lm_lps):
                    if alpha != 0.0:
                        score += alpha * lm_lp
                candidates.append(BeamHyp(
                    tokens=hyp.tokens + (tok,), score=score, state=new_state,
                    us=hyp.us + (new_state.u,),
                    trace=hyp.trace + ((float(lp[tok]), lm_lps),)))
            lm_lps = _lm_scores(lms, contexts, _SENT_END)
            score = hyp.score + float(lp[cfg.eos_id])
            for (_, alpha), lm_lp in zip(lms, lm_lps):
                if alpha != 0.0:
                    score += alpha * lm_lp
            candidates.append(BeamHyp(
                tokens=hyp.tokens, score=score, state=new_state,
                finished=True, ended_by="eos", us=hyp.us + (new_state.u,),
                trace=hyp.trace + ((float(lp[cfg.eos_id]), lm_lps),)))

        candidates.sort(key=BeamHyp.sort_key)
        top = candidates[:beam_size]
        live = []
        for hyp in top:
            if hyp.finished:
                finished.append(hyp)
            elif len(hyp.tokens) >= cap:
                finished.append(replace(hyp, finished=True, ended_by="cap"))
            else:
                live.append(hyp)

    finished.sort(key=BeamHyp.sort_key)
    return finished[:beam_size]


def exhaustive_search(params, cfg, features, max_len: int, lms=(),
                      len_bonus: float = 0.0) -> List[BeamHyp]:
    """Score every token sequence up to `max_len` with the beam step rule.

    Enumerates the full prefix tree, so it agrees with beam_search whenever
    the beam is wide enough to never prune.
    """
    from .data import token_word

    lms = list(lms)
    feats = features.data if isinstance(features, Tensor) else np.asarray(features)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ValueError("features must be a non-empty frames x dims matrix")

    frozen = md.freeze_params(params)
    enc = md.encode(Tensor(feats), cfg.encoder, frozen)
    memory = md.prepare_memory(enc, md.attention_view(frozen, "att.mono"),
                               md.attention_view(frozen, "att.chunk"))
    results = []

    def walk(hyp):
        prev_tok = hyp.tokens[-1] if hyp.tokens else cfg.sos_id
        stepped = replace(hyp.state, token=prev_tok)
        new_state, logits = md.decode_step(stepped, memory, frozen, cfg)
        if new_state is None:
            results.append(replace(hyp, finished=True, ended_by="exhausted"))
            return
        lp = _log_softmax_np(logits.data)
        contexts = [("<s>",) + tuple(token_word(t) for t in hyp.tokens)] * len(lms)
        lm_lps = _lm_scores(lms, contexts, _SENT_END)
        score = hyp.score + float(lp[cfg.eos_id])
        for (_, alpha), lm_lp in zip(lms, lm_lps):
            if alpha != 0.0:
                score += alpha * lm_lp
        results.append(BeamHyp(
            tokens=hyp.tokens, score=score, state=new_state, finished=True,
            ended_by="eos", us=hyp.us + (new_state.u,),
            trace=hyp.trace + ((float(lp[cfg.eos_id]), lm_lps),)))
        for tok in range(cfg.vocab_size):
            tok_lps = _lm_scores(lms, contexts, token_word(tok))
            tok_score = hyp.score + float(lp[tok]) + len_bonus
            for (_, alpha), lm_lp in zip(lms, tok_lps):
                if alpha != 0.0:
                    tok_score += alpha * lm_lp
            child = BeamHyp(
                tokens=hyp.tokens + (tok,), score=tok_score, state=new_state,
                us=hyp.us + (new_state.u,),
                trace=hyp.trace + ((float(lp[tok]), tok_lps),))
            if len(child.tokens) >= max_len:
                results.append(replace(child, finished=True, ended_by="cap"))
            else:
                walk(child)

    walk(BeamHyp(state=md.initial_state(cfg, enc.shape[0])))
    results.sort(key=BeamHyp.sort_key)
    return results


def format_nbest(utt_id, hyps: Sequence[BeamHyp]) -> List[str]:
    """`<utt-id> <rank> <total-score> <tokens...>` lines, rank 1-based."""
    from .data import token_word

    lines = []
    for rank, hyp in enumerate(hyps, start=1):
        words = " ".join(token_word(t) for t in hyp.tokens)
        line = "%s %d %.6f" % (utt_id, rank, hyp.score)
        if words:
            line += " " + words
        lines.append(line)
    return lines
