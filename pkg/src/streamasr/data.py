"""Synthetic corpus for the monotonic-alignment toy task.

Each vocabulary token owns a fixed random prototype vector; an utterance
repeats each token's prototype over a contiguous frame span and adds
Gaussian noise, so the true frame-to-token alignment is known exactly.
Also provides noise-based corpus doubling, time/frequency masking, a
seed-stable validation split, and a plain-text corpus format.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .numerics import Tensor


def token_word(token: int) -> str:
    """Text rendering of a vocabulary token, used for LM text and scoring."""
    return "t%d" % token


def word_token(word: str) -> int:
    """Inverse of token_word; rejects anything not of the form t<int>."""
    if not word.startswith("t"):
        raise ValueError("not a token word: %r" % (word,))
    try:
        return int(word[1:])
    except ValueError:
        raise ValueError("not a token word: %r" % (word,))


@dataclass
class ToyUtterance:
    """One synthetic utterance with its ground-truth alignment.

    alignment holds one half-open frame interval [start, end) per token;
    consecutive intervals abut and together cover every frame.
    """

    utt_id: int
    features: Tensor
    tokens: Tuple[int, ...]
    alignment: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        self.tokens = tuple(int(t) for t in self.tokens)
        self.alignment = tuple((int(a), int(b)) for a, b in self.alignment)
        if not isinstance(self.features, Tensor):
            self.features = Tensor(np.asarray(self.features, dtype=np.float64))
        if self.features.data.ndim != 2:
            raise ValueError("features must be a frames x dims matrix")
        n_frames = self.features.shape[0]
        if len(self.tokens) < 1:
            raise ValueError("utterance needs at least one token")
        if n_frames < len(self.tokens):
            raise ValueError("fewer frames than tokens")
        if len(self.alignment) != len(self.tokens):
            raise ValueError("alignment span count != token count")
        cursor = 0
        for start, end in self.alignment:
            if start != cursor or end <= start:
                raise ValueError("alignment spans must abut and be non-empty")
            cursor = end
        if cursor != n_frames:
            raise ValueError("alignment spans must cover every frame")

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class AugmentPolicy:
    """Masking policy: max band widths per axis and masks per axis."""

    freq_max: int = 0
    time_max: int = 0
    masks_per_axis: int = 1

    def __post_init__(self):
        if self.freq_max < 0 or self.time_max < 0:
            raise ValueError("mask widths must be non-negative")
        if self.masks_per_axis < 0:
            raise ValueError("masks_per_axis must be non-negative")


def _seed_key(seed, *tags) -> List[int]:
    """Flatten a scalar or sequence seed plus stream tags into an rng key."""
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed] + list(tags)
    return [int(seed)] + list(tags)


def token_prototypes(seed: int, vocab_size: int, d: int) -> np.ndarray:
    """The fixed per-token prototype vectors a corpus seed implies."""
    rng = np.random.default_rng(_seed_key(seed, 0))
    return rng.normal(size=(vocab_size, d))


def gen_toy_corpus(
    seed: int,
    vocab_size: int,
    n_utts: int,
    frames_per_token: Tuple[int, int],
    d: int,
    tokens_per_utt: Tuple[int, int] = (3, 8),
    noise_std: float = 0.1,
) -> List[ToyUtterance]:
    """Generate utterances as noisy prototype repeats; pure in the seed."""
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    if d < 4:
        raise ValueError("feature dimension must be >= 4")
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    f_lo, f_hi = int(frames_per_token[0]), int(frames_per_token[1])
    t_lo, t_hi = int(tokens_per_utt[0]), int(tokens_per_utt[1])
    if f_lo < 1 or f_hi < f_lo:
        raise ValueError("bad frames_per_token range")
    if t_lo < 1 or t_hi < t_lo:
        raise ValueError("bad tokens_per_utt range")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")

    protos = token_prototypes(seed, vocab_size, d)
    utts = []
    for i in range(n_utts):
        rng = np.random.default_rng(_seed_key(seed, 1, i))
        n_tokens = int(rng.integers(t_lo, t_hi + 1))
        tokens = tuple(int(t) for t in rng.integers(0, vocab_size, size=n_tokens))
        spans = []
        rows = []
        cursor = 0
        for tok in tokens:
            length = int(rng.integers(f_lo, f_hi + 1))
            block = np.repeat(protos[tok][None, :], length, axis=0)
            if noise_std > 0:
                block = block + rng.normal(0.0, noise_std, size=block.shape)
            rows.append(block)
            spans.append((cursor, cursor + length))
            cursor += length
        features = Tensor(np.concatenate(rows, axis=0))
        utts.append(ToyUtterance(i, features, tokens, tuple(spans)))
    return utts


def add_noise(features: Tensor, sigma_extra: float, seed: int) -> Tensor:
    """Element-wise Gaussian perturbation of a feature matrix."""
    if sigma_extra < 0:
        raise ValueError("sigma_extra must be >= 0")
    data = features.data if isinstance(features, Tensor) else np.asarray(features)
    if sigma_extra == 0:
        return Tensor(data.copy())
    rng = np.random.default_rng(_seed_key(seed, 2))
    return Tensor(data + rng.normal(0.0, sigma_extra, size=data.shape))


def double_corpus(utts: Sequence[ToyUtterance], sigma_extra: float, seed: int) -> List[ToyUtterance]:
    """Append a noise-perturbed copy of every utterance; originals untouched."""
    out = list(utts)
    base = len(out)
    for k, utt in enumerate(utts):
        noisy = add_noise(utt.features, sigma_extra, _seed_key(seed, k))
        out.append(ToyUtterance(base + k, noisy, utt.tokens, utt.alignment))
    return out


def spec_augment(features: Tensor, policy: AugmentPolicy, seed: int) -> Tensor:
    """Mask random frequency and time bands with the utterance feature mean.

    Band widths are drawn uniformly from 0..max per mask; a zero-width draw
    masks nothing. Frequency masks are drawn before time masks.
    """
    data = (features.data if isinstance(features, Tensor) else np.asarray(features)).copy()
    n_frames, n_dims = data.shape
    if policy.freq_max > n_dims:
        raise ValueError("freq_max exceeds feature dimension")
    if policy.time_max > n_frames:
        raise ValueError("time_max exceeds frame count")
    rng = np.random.default_rng(_seed_key(seed, 3))
    fill = float(data.mean())
    for _ in range(policy.masks_per_axis):
        width = int(rng.integers(0, policy.freq_max + 1))
        start = int(rng.integers(0, n_dims - width + 1))
        data[:, start:start + width] = fill
    for _ in range(policy.masks_per_axis):
        width = int(rng.integers(0, policy.time_max + 1))
        start = int(rng.integers(0, n_frames - width + 1))
        data[start:start + width, :] = fill
    return Tensor(data)


def scaled_policy(d: int, max_frames: int, freq_max: int = 13, time_max: int = 50,
                  masks_per_axis: int = 1) -> AugmentPolicy:
    """Shrink reference mask maxima to fit small feature shapes.

    The reference widths (13 frequency bins, 50 frames) target 80-dim
    filterbanks over a few hundred frames; the toy corpus keeps roughly
    the same fractional coverage of each axis.
    """
    freq = min(freq_max, max(1, round(d * freq_max / 80.0)))
    time = min(time_max, max(1, round(max_frames * time_max / 400.0)))
    return AugmentPolicy(freq_max=freq, time_max=time, masks_per_axis=masks_per_axis)


def split_corpus(utts: Sequence[ToyUtterance], val_fraction: float = 0.05,
                 seed: int = 0) -> Tuple[List[ToyUtterance], List[ToyUtterance]]:
    """Split by a seed-stable hash of each utterance id.

    The same (seed, utt_id) lands in the same side regardless of corpus
    order or size, so regenerating a corpus never leaks val into train.
    """
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must be in [0, 1)")
    train, val = [], []
    threshold = int(val_fraction * 2**32)
    for utt in utts:
        key = ("%d:%d" % (seed, utt.utt_id)).encode()
        if zlib.crc32(key) < threshold:
            val.append(utt)
        else:
            train.append(utt)
    if utts and not val and val_fraction > 0:
        # tiny corpora can hash entirely into train; keep one utterance out
        val.append(train.pop())
    return train, val


def save_corpus(utts: Sequence[ToyUtterance], path: str) -> None:
    """Write utterances in the plain-text corpus format."""
    with open(path, "w") as fh:
        for utt in utts:
            tokens = " ".join(str(t) for t in utt.tokens)
            spans = " ".join("%d:%d" % (a, b) for a, b in utt.alignment)
            fh.write("utt %d T %d d %d tokens %s spans %s\n"
                     % (utt.utt_id, utt.n_frames, utt.features.shape[1], tokens, spans))
            for row in utt.features.data:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_corpus(path: str) -> List[ToyUtterance]:
    """Read utterances written by save_corpus; exact float round trip."""
    utts = []
    with open(path) as fh:
        lines = fh.read().splitlines()
    pos = 0
    while pos < len(lines):
        header = lines[pos].split()
        pos += 1
        if len(header) < 8 or header[0] != "utt" or header[2] != "T" or header[4] != "d":
            raise ValueError("bad corpus header at line %d" % pos)
        utt_id = int(header[1])
        n_frames = int(header[3])
        n_dims = int(header[5])
        if header[6] != "tokens" or "spans" not in header:
            raise ValueError("bad corpus header at line %d" % pos)
        spans_at = header.index("spans")
        tokens = tuple(int(t) for t in header[7:spans_at])
        spans = tuple(tuple(int(x) for x in pair.split(":")) for pair in header[spans_at + 1:])
        if pos + n_frames > len(lines):
            raise ValueError("truncated corpus: utterance %d" % utt_id)
        rows = []
        for r in range(n_frames):
            vals = [float(v) for v in lines[pos + r].split()]
            if len(vals) != n_dims:
                raise ValueError("bad frame width at line %d" % (pos + r + 1))
            rows.append(vals)
        pos += n_frames
        features = Tensor(np.asarray(rows, dtype=np.float64))
        utts.append(ToyUtterance(utt_id, features, tokens, spans))
    return utts
