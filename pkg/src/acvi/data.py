"""Vocabulary, per-example OOV indexing, synthetic tasks and corpus I/O."""

from __future__ import annotations

import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, FormatError

logger = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<s>", "</s>")

Example = Tuple[List[str], List[str]]


class Vocabulary:
    """Bijection between tokens and ids with the four reserved ids first."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.tokens: List[str] = list(RESERVED)
        self.index: Dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        for tok in tokens:
            if tok not in self.index:
                self.index[tok] = len(self.tokens)
                self.tokens.append(tok)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def encode(self, tokens: Iterable[str]) -> List[int]:
        return [self.id(t) for t in tokens]


def build_vocab(corpus: Iterable[Sequence[str]], max_size: int) -> Vocabulary:
    """Keep the ``max_size - 4`` most frequent tokens; ties go to earlier first occurrence."""
    counts: Counter = Counter()
    for seq in corpus:
        counts.update(t for t in seq if t not in RESERVED)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if max_size < len(RESERVED):
        raise ConfigError(f"vocabulary max_size must be at least {len(RESERVED)}")
    # Counter preserves first-insertion order, and sorted() is stable
    ranked = sorted(counts, key=lambda t: -counts[t])
    return Vocabulary(ranked[: max_size - len(RESERVED)])


def pair_corpus(pairs: Iterable[Example]) -> Iterable[List[str]]:
    for src, tgt in pairs:
        yield list(src) + list(tgt)


@dataclass
class SequencePair:
    source: List[str]
    target: List[str]
    source_ids: List[int]
    source_ext_ids: List[int]
    target_ids: List[int]
    target_ext_ids: List[int]
    oov_tokens: List[str] = field(default_factory=list)
    features: Optional[np.ndarray] = None  # [N, f] for feature-sequence sources


def encode_pair(source: Sequence[str], target: Sequence[str], vocab: Vocabulary) -> SequencePair:
    """Map tokens to ids, giving each distinct source OOV an extended id ``|V| + j``."""
    if not source or not target:
        raise ValueError("source and target must be non-empty")
    return _encode(source, target, vocab)


def encode_source(source: Sequence[str], vocab: Vocabulary) -> SequencePair:
    """Encode a source with no reference, for decoding."""
    if not source:
        raise ValueError("source must be non-empty")
    return _encode(source, [], vocab)


def _encode(source: Sequence[str], target: Sequence[str], vocab: Vocabulary) -> SequencePair:
    V = len(vocab)
    oov: List[str] = []
    src_ids, src_ext = [], []
    for tok in source:
        i = vocab.id(tok)
        src_ids.append(i)
        if i == UNK and tok not in vocab:
            if tok not in oov:
                oov.append(tok)
            src_ext.append(V + oov.index(tok))
        else:
            src_ext.append(i)
    tgt_ids, tgt_ext = [], []
    for tok in target:
        i = vocab.id(tok)
        tgt_ids.append(i)
        if i == UNK and tok in oov:
            tgt_ext.append(V + oov.index(tok))
        else:
            tgt_ext.append(i)
    return SequencePair(list(source), list(target), src_ids, src_ext, tgt_ids, tgt_ext, oov)


def encode_feature_pair(features: np.ndarray, target: Sequence[str], vocab: Vocabulary) -> SequencePair:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0 or not target:
        raise ValueError("feature source must be a non-empty [N, f] matrix and target non-empty")
    n = features.shape[0]
    tgt = vocab.encode(target)
    return SequencePair([], list(target), [UNK] * n, [UNK] * n, tgt, list(tgt), [], features)


def decode_ids(ids: Iterable[int], vocab: Vocabulary, oov_tokens: Sequence[str] = ()) -> List[str]:
    """Render extended ids back to tokens, stopping at EOS."""
    out = []
    V = len(vocab)
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        out.append(vocab.token(i) if i < V else oov_tokens[i - V])
    return out


def source_tokens_from_ids(pair: SequencePair, vocab: Vocabulary) -> List[str]:
    """Inverse of :func:`encode_pair` on the source side."""
    return decode_ids(pair.source_ext_ids, vocab, pair.oov_tokens)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    src_ids: np.ndarray  # [B, N]
    src_ext: np.ndarray  # [B, N]
    src_mask: np.ndarray  # [B, N]
    dec_in: np.ndarray  # [B, T]
    dec_target: np.ndarray  # [B, T]
    dec_mask: np.ndarray  # [B, T]
    oov_tokens: List[List[str]]
    n_oov: int
    features: Optional[np.ndarray] = None  # [B, N, f]

    @property
    def size(self) -> int:
        return self.src_ids.shape[0]


def make_batch(pairs: Sequence[SequencePair], pointer: bool, max_encode: Optional[int] = None,
               max_decode: Optional[int] = None) -> Batch:
    """Right-pad a list of pairs; sources and decoder steps are truncated to the caps."""
    if not pairs:
        raise ValueError("cannot batch zero examples")
    B = len(pairs)
    srcs = [(p.source_ids, p.source_ext_ids) for p in pairs]
    lens = [len(s[0]) if max_encode is None else min(len(s[0]), max_encode) for s in srcs]
    N = max(lens)
    src_ids = np.zeros((B, N), dtype=np.int64)
    src_ext = np.zeros((B, N), dtype=np.int64)
    src_mask = np.zeros((B, N), dtype=bool)
    feats = None
    if pairs[0].features is not None:
        feats = np.zeros((B, N, pairs[0].features.shape[1]))
    for b, (p, n) in enumerate(zip(pairs, lens)):
        src_ids[b, :n] = p.source_ids[:n]
        src_ext[b, :n] = p.source_ext_ids[:n]
        src_mask[b, :n] = True
        if feats is not None:
            feats[b, :n] = p.features[:n]
    dec = []
    for p in pairs:
        target = p.target_ext_ids if pointer else p.target_ids
        d_in = [BOS] + list(p.target_ids)
        d_out = list(target) + [EOS]
        if max_decode is not None:
            d_in, d_out = d_in[:max_decode], d_out[:max_decode]
        dec.append((d_in, d_out))
    T_ = max(len(d[0]) for d in dec)
    dec_in = np.zeros((B, T_), dtype=np.int64)
    dec_target = np.zeros((B, T_), dtype=np.int64)
    dec_mask = np.zeros((B, T_), dtype=bool)
    for b, (d_in, d_out) in enumerate(dec):
        dec_in[b, :len(d_in)] = d_in
        dec_target[b, :len(d_out)] = d_out
        dec_mask[b, :len(d_out)] = True
    oov = [list(p.oov_tokens) for p in pairs]
    n_oov = max(len(o) for o in oov) if pointer else 0
    if not pointer:
        src_ext = src_ids.copy()
    return Batch(src_ids, src_ext, src_mask, dec_in, dec_target, dec_mask, oov, n_oov, feats)


# ---------------------------------------------------------------------------
# Synthetic tasks
# ---------------------------------------------------------------------------

SYNTH_KINDS = ("copy", "reverse", "pointer")


def synth_task(kind: str, seed: int, n_examples: int, vocab_size: int, min_len: int,
               max_len: int, rare_size: int = 200) -> List[Example]:
    """Deterministic toy seq2seq data.

    ``copy`` and ``reverse`` draw sources from tokens ``w0 .. w{vocab_size-1}``.
    ``pointer`` additionally plants 1-3 tokens from a disjoint ``r*`` alphabet
    that is large enough never to survive a frequency cutoff at ``vocab_size``;
    the target is a copy of the source, so those tokens must be copied.
    """
    if kind not in SYNTH_KINDS:
        raise ConfigError(f"unknown synthetic task {kind!r}; expected one of {SYNTH_KINDS}")
    if not 1 <= min_len <= max_len or n_examples < 0 or vocab_size < 1:
        raise ConfigError(f"invalid synthetic ranges: len [{min_len}, {max_len}], "
                          f"n={n_examples}, vocab={vocab_size}")
    rng = np.random.default_rng(seed)
    out: List[Example] = []
    for _ in range(n_examples):
        n = int(rng.integers(min_len, max_len + 1))
        src = [f"w{j}" for j in rng.integers(0, vocab_size, size=n)]
        if kind == "pointer":
            k = int(rng.integers(1, min(3, n) + 1))
            for pos in rng.choice(n, size=k, replace=False):
                src[int(pos)] = f"r{int(rng.integers(0, rare_size))}"
        tgt = list(reversed(src)) if kind == "reverse" else list(src)
        out.append((src, tgt))
    return out


def synth_feature_task(seed: int, n_examples: int, vocab_size: int, feature_dim: int,
                       min_len: int, max_len: int, noise: float = 0.1
                       ) -> List[Tuple[np.ndarray, List[str]]]:
    """Feature sequences whose frames are noisy class prototypes; the target names the classes."""
    if not 1 <= min_len <= max_len or feature_dim < 1:
        raise ConfigError("invalid synthetic feature ranges")
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((vocab_size, feature_dim))
    out = []
    for _ in range(n_examples):
        n = int(rng.integers(min_len, max_len + 1))
        cls = rng.integers(0, vocab_size, size=n)
        feats = protos[cls] + noise * rng.standard_normal((n, feature_dim))
        out.append((np.round(feats, 6), [f"w{j}" for j in cls]))
    return out


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------

def load_text_corpus(path: str, lowercase: bool = False) -> List[Example]:
    """One ``source<TAB>target`` example per line; ``#`` in column 0 starts a comment."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"corpus file not found: {path}")
    pairs: List[Example] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if line.startswith("#") or not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected exactly one TAB separating source and target")
            if lowercase:
                parts = [p.lower() for p in parts]
            src, tgt = parts[0].split(), parts[1].split()
            if not src or not tgt:
                raise FormatError(f"{path}:{lineno}: empty source or target")
            pairs.append((src, tgt))
    if not pairs:
        logger.warning("corpus %s contains no examples", path)
    return pairs


def write_text_corpus(path: str, pairs: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for src, tgt in pairs:
            fh.write(" ".join(src) + "\t" + " ".join(tgt) + "\n")


@dataclass
class FeatureSequence:
    features: np.ndarray  # [N, f]
    mask: np.ndarray  # [N]

    def __post_init__(self):
        if not np.all(np.isfinite(self.features)):
            raise FormatError("feature sequence contains non-finite values")


def load_feature_corpus(path: str, targets_path: str, lowercase: bool = False
                        ) -> List[Tuple[FeatureSequence, List[str]]]:
    """Read ``N f`` headed float blocks separated by blank lines, plus a target file."""
    for p in (path, targets_path):
        if not os.path.exists(p):
            raise FileNotFoundError(f"corpus file not found: {p}")
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    seqs: List[FeatureSequence] = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        header = lines[i].split()
        if len(header) != 2:
            raise FormatError(f"{path}:{i + 1}: expected header 'N f'")
        try:
            n, f = int(header[0]), int(header[1])
        except ValueError as exc:
            raise FormatError(f"{path}:{i + 1}: header values must be integers") from exc
        rows = []
        for j in range(n):
            k = i + 1 + j
            if k >= len(lines) or not lines[k].strip():
                raise FormatError(f"{path}:{k + 1}: expected {n} feature rows, got {j}")
            try:
                row = [float(v) for v in lines[k].split()]
            except ValueError as exc:
                raise FormatError(f"{path}:{k + 1}: non-numeric feature value") from exc
            if len(row) != f:
                raise FormatError(f"{path}:{k + 1}: expected {f} values, got {len(row)}")
            rows.append(row)
        arr = np.asarray(rows, dtype=np.float64).reshape(n, f)
        seqs.append(FeatureSequence(arr, np.ones(n, dtype=bool)))
        i += 1 + n
    with open(targets_path, encoding="utf-8") as fh:
        targets = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if len(targets) != len(seqs):
        raise FormatError(f"{targets_path}: {len(targets)} targets for {len(seqs)} feature sequences")
    if not seqs:
        logger.warning("feature corpus %s contains no examples", path)
    return [(s, (t.lower() if lowercase else t).split()) for s, t in zip(seqs, targets)]


def write_feature_corpus(path: str, targets_path: str,
                         examples: Iterable[Tuple[np.ndarray, Sequence[str]]]) -> None:
    examples = list(examples)
    with open(path, "w", encoding="utf-8") as fh:
        for k, (feats, _) in enumerate(examples):
            feats = np.asarray(feats)
            if k:
                fh.write("\n")
            fh.write(f"{feats.shape[0]} {feats.shape[1]}\n")
            for row in feats:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")
    with open(targets_path, "w", encoding="utf-8") as fh:
        for _, tgt in examples:
            fh.write(" ".join(tgt) + "\n")
