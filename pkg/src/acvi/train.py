"""Optimisation, the phased training schedule and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .config import TrainConfig
from .data import (FeatureSequence, SequencePair, Vocabulary, build_vocab, decode_ids, encode_feature_pair,
                   encode_pair, make_batch, pair_corpus)
from .decoding import beam_search, greedy_decode
from .errors import ConfigError
from .metrics import corpus_scores
from .model import Seq2Seq
from .posterior import NoiseSource

logger = logging.getLogger(__name__)

Moments = Dict[str, Tuple[np.ndarray, np.ndarray]]


class VocabMismatchError(ValueError):
    """A dataset was prepared for a different model than the checkpoint holds."""


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], moments: Moments, step: int,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
              ) -> Tuple[Dict[str, np.ndarray], Moments]:
    """One bias-corrected Adam update, in place.  ``step`` counts from 1."""
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise T.DimensionError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m, v = moments.get(name) or (np.zeros_like(p), np.zeros_like(p))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
        moments[name] = (m.astype(p.dtype), v.astype(p.dtype))
    return params, moments


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for k in grads:
            grads[k] = (grads[k] * factor).astype(grads[k].dtype)
    return norm


def kl_weight_at(config: TrainConfig, step: int) -> float:
    if config.kl_warmup_steps <= 0:
        return config.kl_weight
    return config.kl_weight * min(1.0, (step + 1) / config.kl_warmup_steps)


def context_mode_at(config: TrainConfig, step: int) -> str:
    """Weighted-average heuristic first, Gumbel-Softmax for the final fraction of training."""
    return "heuristic" if step < config.gumbel_start else "gumbel"


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Examples used at ``step``: a fresh permutation per epoch, addressed by step."""
    b = min(batch_size, n)
    per_epoch = n // b
    epoch, j = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, 7, epoch]).permutation(n)
    return np.sort(perm[j * b:(j + 1) * b])


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------

def _is_feature_example(ex) -> bool:
    return isinstance(ex[0], (FeatureSequence, np.ndarray))


def prepare(examples: Sequence, vocab: Vocabulary) -> List[SequencePair]:
    out = []
    for src, tgt in examples:
        if isinstance(src, FeatureSequence):
            out.append(encode_feature_pair(src.features, tgt, vocab))
        elif isinstance(src, np.ndarray):
            out.append(encode_feature_pair(src, tgt, vocab))
        else:
            out.append(encode_pair(src, tgt, vocab))
    return out


def vocab_for(examples: Sequence, max_size: int) -> Vocabulary:
    if examples and _is_feature_example(examples[0]):
        return build_vocab((tgt for _, tgt in examples), max_size)
    return build_vocab(pair_corpus(examples), max_size)


def feature_dim_of(examples: Sequence) -> Optional[int]:
    if not examples or not _is_feature_example(examples[0]):
        return None
    src = examples[0][0]
    arr = src.features if isinstance(src, FeatureSequence) else src
    return int(arr.shape[1])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: List[float] = field(default_factory=list)
    modes: List[str] = field(default_factory=list)
    evals: List[Tuple[int, float]] = field(default_factory=list)
    stopped_early: bool = False


def frozen_params(config: TrainConfig, step: int) -> Tuple[str, ...]:
    """Parameters held fixed at ``step``: the coverage weight until fine-tuning starts."""
    *_, finetune = config.phase_at(step)
    return () if (config.coverage and finetune) else ("attn.w_k",)


def train(config: TrainConfig, examples: Sequence, vocab: Optional[Vocabulary] = None,
          resume: Optional[Checkpoint] = None, stop_at: Optional[int] = None,
          eval_every: int = 0, eval_fn: Optional[Callable[[Seq2Seq, int], Tuple[float, bool]]] = None,
          ) -> TrainResult:
    """Run (or continue) training and return the final checkpoint and loss trace.

    The trace holds one loss per step taken in this call.  ``stop_at`` ends the
    run early at a global step (for resume checks); ``eval_fn(model, step)``
    is called every ``eval_every`` steps and may ask to stop by returning
    ``(value, True)``.
    """
    if not examples:
        raise ValueError("training dataset is empty")
    config.validate()
    if resume is not None:
        if resume.config != config:
            raise ConfigError("resume checkpoint was written with a different configuration")
        vocab = resume.vocab
        params = resume.params.copy()
        moments = {k: (m.copy(), v.copy()) for k, (m, v) in resume.moments.items()}
        start = resume.step
    else:
        vocab = vocab or vocab_for(examples, config.vocab_max_size)
        params = None
        moments = {}
        start = 0
    feat_dim = feature_dim_of(examples)
    model = Seq2Seq(config, len(vocab), feat_dim, params)
    params = model.params
    data = prepare(examples, vocab)
    noise = NoiseSource(config.seed)
    end = config.total_steps if stop_at is None else min(stop_at, config.total_steps)
    result = TrainResult(None)
    step = start
    for step in range(start, end):
        _, max_enc, max_dec, finetune = config.phase_at(step)
        idx = batch_indices(len(data), config.batch_size, config.seed, step)
        batch = make_batch([data[i] for i in idx], config.pointer, max_enc, max_dec)
        mode = context_mode_at(config, step)
        params.zero_grad()
        with T.Tape() as tape:
            out = model.forward(batch, step, mode, noise, use_coverage=config.coverage and finetune,
                                kl_weight=kl_weight_at(config, step), training=True)
        T.backward(tape, out.loss)
        grads = params.grads()
        for name in frozen_params(config, step):
            grads.pop(name, None)
        clip_global_norm(grads, config.grad_clip)
        adam_step({n: params[n].data for n in grads}, grads, moments, step + 1, config.lr,
                  config.beta1, config.beta2, config.adam_eps)
        result.trace.append(float(out.loss.data))
        result.modes.append(mode if config.model == "acvi" else "sa")
        if eval_fn is not None and eval_every and (step + 1) % eval_every == 0:
            value, stop = eval_fn(model, step + 1)
            result.evals.append((step + 1, value))
            if stop:
                result.stopped_early = True
                step += 1
                break
    else:
        step = end
    params.zero_grad()
    result.checkpoint = Checkpoint(config, step, params, moments, vocab, feat_dim)
    return result


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def model_from_checkpoint(cp: Checkpoint) -> Seq2Seq:
    return Seq2Seq(cp.config, len(cp.vocab), cp.feature_dim, cp.params)


def teacher_forced(model: Seq2Seq, data: Sequence[SequencePair], batch_size: int = 64
                   ) -> Dict[str, float]:
    """Token accuracy and mean per-token log-likelihood with reference inputs (mean-mode context)."""
    correct = tokens = 0
    ll = 0.0
    for k in range(0, len(data), batch_size):
        batch = make_batch(list(data[k:k + batch_size]), model.config.pointer)
        out = model.forward(batch, mode="mean")
        correct += out.correct
        tokens += out.n_tokens
        ll += float(out.step_log_lik.sum())
    return {"token_accuracy": correct / max(tokens, 1), "mean_log_likelihood": ll / max(tokens, 1)}


def token_accuracy(model: Seq2Seq, examples: Sequence, vocab: Vocabulary) -> float:
    return teacher_forced(model, prepare(examples, vocab))["token_accuracy"]


@dataclass
class EvalResult:
    metrics: Dict[str, float]
    outputs: List[List[str]]
    attention: Optional[np.ndarray] = None  # [T, N] for the first example


def decode_pair(model: Seq2Seq, pair: SequencePair, vocab: Vocabulary, beam_width: int,
                max_len: int) -> List[str]:
    session = model.session(pair, noise=NoiseSource(model.config.seed))
    if beam_width == 1:
        hyp = greedy_decode(session, max_len)
    else:
        hyp = beam_search(session, beam_width, max_len, model.config.length_norm)
    return decode_ids(hyp.tokens, vocab, pair.oov_tokens)


def evaluate(cp: Checkpoint, examples: Sequence, beam_width: Optional[int] = None,
             max_len: Optional[int] = None, vocab: Optional[Vocabulary] = None,
             references: Optional[Sequence[Sequence[Sequence[str]]]] = None) -> EvalResult:
    """Decode every example with beam search and score it.

    ``vocab`` is the vocabulary the dataset was prepared with, if any; it must
    match the checkpoint's.
    """
    if vocab is not None and vocab != cp.vocab:
        raise VocabMismatchError(f"dataset vocabulary ({len(vocab)} tokens) differs from the "
                                 f"checkpoint vocabulary ({len(cp.vocab)} tokens)")
    fdim = feature_dim_of(examples)
    if fdim != cp.feature_dim:
        raise VocabMismatchError(f"dataset source kind/width {fdim} does not match checkpoint {cp.feature_dim}")
    model = model_from_checkpoint(cp)
    width = beam_width or cp.config.beam_width
    max_len = max_len or cp.config.max_decode_len
    data = prepare(examples, cp.vocab)
    metrics = teacher_forced(model, data)
    outputs = [decode_pair(model, p, cp.vocab, width, max_len) for p in data]
    refs = references if references is not None else [[p.target] for p in data]
    sources = [p.source for p in data] if fdim is None else ()
    metrics.update(corpus_scores(outputs, refs, sources, cp.vocab if fdim is None else None))
    metrics["exact_match"] = float(np.mean([o == p.target for o, p in zip(outputs, data)])) if data else 0.0
    metrics["n_examples"] = len(data)
    attention = None
    if data:
        out = model.forward(make_batch([data[0]], cp.config.pointer), mode="mean")
        attention = out.attention[0]
    return EvalResult(metrics, outputs, attention)
