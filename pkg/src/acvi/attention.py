"""Additive attention, soft-attention context and coverage."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .rnn import EncoderOutput, LSTMState
from .errors import ConfigError
from .tensor import DimensionError, Tensor


@dataclass
class AttentionParams:
    W_h: Tensor  # [d_a, 2d]
    W_s: Tensor  # [d_a, d]
    b_attn: Tensor  # [d_a]
    v: Tensor  # [d_a]
    w_k: Tensor  # [d_a]

    def __post_init__(self):
        d_a = self.v.shape[0]
        if self.b_attn.shape != (d_a,) or self.w_k.shape != (d_a,):
            raise DimensionError("v, b_attn and w_k must share one length")
        if self.W_h.shape[0] != d_a or self.W_s.shape[0] != d_a:
            raise DimensionError(f"W_h {self.W_h.shape} / W_s {self.W_s.shape} rows must equal {d_a}")


@dataclass
class AttentionWeights:
    scores: Tensor  # [B, N], masked entries hold the sentinel
    weights: Tensor  # [B, N]
    mask: np.ndarray  # [B, N]


@dataclass
class CoverageState:
    coverage: Tensor  # [B, N]

    @classmethod
    def zeros(cls, batch: int, n: int, dtype=None) -> "CoverageState":
        dtype = dtype or T.default_dtype()
        return cls(Tensor(np.zeros((batch, n), dtype=dtype), dtype=dtype))


def project_encodings(enc: EncoderOutput, params: AttentionParams) -> Tensor:
    """``W_h h_i`` for every position; independent of the decoding step, so cache it."""
    return T.linear(enc.encodings, params.W_h)


def attention_scores(enc: EncoderOutput, s_t: LSTMState, params: AttentionParams,
                     coverage: Optional[CoverageState] = None,
                     projected: Optional[Tensor] = None) -> Tensor:
    """``e_t^i = v . tanh(W_h h_i + W_s s_t [+ w_k k_t^i] + b_attn)`` over [B, N]."""
    B, N = enc.mask.shape
    d_a = params.v.shape[0]
    if s_t.hidden.shape != (B, params.W_s.shape[1]):
        raise DimensionError(f"decoder state {s_t.hidden.shape} incompatible with W_s {params.W_s.shape}")
    if projected is None:
        projected = project_encodings(enc, params)
    query = T.linear(s_t.hidden, params.W_s, params.b_attn)
    feats = projected + T.broadcast_to(T.reshape(query, (B, 1, d_a)), (B, N, d_a))
    if coverage is not None:
        k = T.broadcast_to(T.reshape(coverage.coverage, (B, N, 1)), (B, N, d_a))
        feats = feats + k * T.broadcast_to(params.w_k, (B, N, d_a))
    e = T.reshape(T.linear(T.tanh(feats), T.reshape(params.v, (1, d_a))), (B, N))
    sentinel = Tensor(np.full((B, N), T.MASK_SENTINEL, dtype=e.dtype), dtype=e.dtype)
    return T.where(enc.mask, e, sentinel)


def attention_weights(scores: Tensor, mask: np.ndarray) -> AttentionWeights:
    return AttentionWeights(scores, T.softmax(scores, mask), np.asarray(mask, dtype=bool))


def sa_context(weights: AttentionWeights, enc: EncoderOutput) -> Tensor:
    """``c_t = sum_i a_t^i h_i`` -> [B, 2d]."""
    a = weights.weights
    B, N = a.shape
    if enc.encodings.shape[:2] != (B, N):
        raise DimensionError(f"weights {a.shape} do not match encodings {enc.encodings.shape}")
    return T.reshape(T.bmm(T.reshape(a, (B, 1, N)), enc.encodings), (B, enc.encodings.shape[2]))


def update_coverage(cov: CoverageState, a_t: AttentionWeights) -> CoverageState:
    return CoverageState(cov.coverage + a_t.weights)


def coverage_loss(a_t: AttentionWeights, cov: CoverageState, lam: float = 1.0) -> Tensor:
    """Per-example ``lam * sum_i min(a_t^i, k_t^i)`` -> [B]."""
    if lam < 0:
        raise ConfigError(f"coverage lambda must be non-negative, got {lam}")
    return T.scale(T.sum(T.minimum(a_t.weights, cov.coverage), axis=1), lam)
