"""Output head: vocabulary softmax, generation gate and copy mixing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

LOG_FLOOR = 1e-12


@dataclass
class OutputParams:
    V: Tensor  # [h_out, d + 2d]
    b: Tensor  # [h_out]
    V_out: Tensor  # [|V|, h_out]
    b_out: Tensor  # [|V|]
    w_c: Optional[Tensor] = None  # [2d]
    w_s: Optional[Tensor] = None  # [d]
    w_x: Optional[Tensor] = None  # [e]
    b_ptr: Optional[Tensor] = None  # scalar, stored as shape (1,)

    @property
    def vocab_size(self) -> int:
        return self.V_out.shape[0]


@dataclass
class ExtendedDistribution:
    probs: Tensor  # [B, |V| + n_oov]
    oov_tokens: List[List[str]] = field(default_factory=list)


def vocab_distribution(s_t: Tensor, c_t: Tensor, params: OutputParams) -> Tensor:
    """``softmax(V' tanh(V [s_t; c_t] + b) + b')`` -> [B, |V|]."""
    if params.V.shape[1] != s_t.shape[-1] + c_t.shape[-1]:
        raise DimensionError(f"V {params.V.shape} incompatible with [s; c] of width "
                             f"{s_t.shape[-1] + c_t.shape[-1]}")
    hidden = T.tanh(T.linear(T.concat([s_t, c_t], axis=1), params.V, params.b))
    return T.softmax(T.linear(hidden, params.V_out, params.b_out))


def generation_prob(c_t: Tensor, s_t: Tensor, x_t: Tensor, params: OutputParams) -> Tensor:
    """``sigmoid(w_c.c + w_s.s + w_x.x + b_ptr)`` -> [B]."""
    w = T.concat([params.w_c, params.w_s, params.w_x], axis=0)
    feats = T.concat([c_t, s_t, x_t], axis=1)
    if feats.shape[1] != w.shape[0]:
        raise DimensionError(f"generation gate weights {w.shape} vs features {feats.shape}")
    B = feats.shape[0]
    z = T.linear(feats, T.reshape(w, (1, w.shape[0])), params.b_ptr)
    return T.reshape(T.sigmoid(z), (B,))


def final_distribution(p_vocab: Tensor, p_gen: Tensor, a_t: Tensor, source_extended_ids: np.ndarray,
                       n_oov: int = 0, oov_tokens: Optional[Sequence[Sequence[str]]] = None
                       ) -> ExtendedDistribution:
    """Mix generation and copying over the extended vocabulary.

    ``P(w) = p_gen P_vocab(w) + (1 - p_gen) sum_{i: src_i = w} a_t^i``.  Masked
    source positions carry zero attention and therefore add nothing.
    """
    B, V = p_vocab.shape
    ids = np.asarray(source_extended_ids, dtype=np.int64)
    if ids.shape != a_t.shape or p_gen.shape != (B,):
        raise DimensionError(f"final_distribution shapes: p_vocab {p_vocab.shape}, p_gen {p_gen.shape}, "
                             f"a {a_t.shape}, ids {ids.shape}")
    size = V + n_oov
    if ids.size and (ids.min() < 0 or ids.max() >= size):
        raise DimensionError(f"source extended id out of range [0, {size})")
    N = a_t.shape[1]
    gen = p_vocab * T.broadcast_to(T.reshape(p_gen, (B, 1)), (B, V))
    if n_oov:
        gen = T.concat([gen, Tensor(np.zeros((B, n_oov), dtype=gen.dtype), dtype=gen.dtype)], axis=1)
    copy_w = a_t * T.broadcast_to(T.reshape(1.0 - p_gen, (B, 1)), (B, N))
    probs = gen + T.scatter_add(copy_w, ids, size)
    return ExtendedDistribution(probs, [list(o) for o in (oov_tokens or [[] for _ in range(B)])])


def target_log_prob(probs: Tensor, targets: np.ndarray) -> Tensor:
    """``log max(P(target), 1e-12)`` per row -> [B]."""
    return T.log_floor(T.gather_last(probs, targets), LOG_FLOOR)
