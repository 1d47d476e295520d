"""LSTM cell, bidirectional encoder and the decoder recurrence.

All functions take a leading batch axis; a single sequence is a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


@dataclass
class LSTMState:
    hidden: Tensor  # [B, d]
    cell: Tensor  # [B, d]

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise DimensionError(f"hidden {self.hidden.shape} and cell {self.cell.shape} differ")

    @classmethod
    def zeros(cls, batch: int, d: int, dtype=None) -> "LSTMState":
        dtype = dtype or T.default_dtype()
        z = np.zeros((batch, d), dtype=dtype)
        return cls(Tensor(z, dtype=dtype), Tensor(z.copy(), dtype=dtype))


@dataclass
class EncoderOutput:
    encodings: Tensor  # [B, N, 2d]; row i is [forward_i ; backward_i]
    mask: np.ndarray  # [B, N] bool, True on real tokens
    forward_final: LSTMState
    backward_final: LSTMState

    @property
    def length(self) -> int:
        return self.encodings.shape[1]


def lstm_step(x: Tensor, state: LSTMState, w: Tensor, b: Tensor,
              mask: Optional[np.ndarray] = None) -> LSTMState:
    """Standard LSTM update; rows with ``mask`` False keep their previous state."""
    d = state.hidden.shape[1]
    hc = T.lstm_cell(x, state.hidden, state.cell, w, b, mask)
    return LSTMState(hc[:, :d], hc[:, d:])


def lstm_step_reference(x: Tensor, state: LSTMState, w: Tensor, b: Tensor) -> LSTMState:
    """The same update composed from primitive ops (used to cross-check the fused cell)."""
    d = state.hidden.shape[1]
    z = T.linear(T.concat([x, state.hidden], axis=1), w, b)
    i = T.sigmoid(z[:, :d])
    f = T.sigmoid(z[:, d:2 * d])
    g = T.tanh(z[:, 2 * d:3 * d])
    o = T.sigmoid(z[:, 3 * d:])
    c = f * state.cell + i * g
    return LSTMState(o * T.tanh(c), c)


def encode_bilstm(embeddings: Tensor, mask: np.ndarray, fwd: Tuple[Tensor, Tensor],
                  bwd: Tuple[Tensor, Tensor]) -> EncoderOutput:
    """Run forward and backward LSTMs over [B, N, e] inputs.

    Padded positions still produce states (copies of the neighbouring real
    state) but never feed into the states of real positions.
    """
    if embeddings.ndim != 3 or embeddings.shape[1] == 0:
        raise ValueError("encode_bilstm needs a non-empty [B, N, e] input")
    mask = np.asarray(mask, dtype=bool)
    B, N, _ = embeddings.shape
    if mask.shape != (B, N):
        raise DimensionError(f"mask shape {mask.shape} does not match inputs {embeddings.shape}")
    d = fwd[1].shape[0] // 4
    dtype = embeddings.dtype
    steps = [embeddings[:, i, :] for i in range(N)]

    state = LSTMState.zeros(B, d, dtype)
    forward = []
    for i in range(N):
        state = lstm_step(steps[i], state, *fwd, mask=mask[:, i])
        forward.append(state.hidden)
    fwd_final = state

    state = LSTMState.zeros(B, d, dtype)
    backward = [None] * N
    for i in reversed(range(N)):
        state = lstm_step(steps[i], state, *bwd, mask=mask[:, i])
        backward[i] = state.hidden
    bwd_final = state

    enc = T.concat([T.stack(forward, axis=1), T.stack(backward, axis=1)], axis=2)
    return EncoderOutput(enc, mask, fwd_final, bwd_final)


def bridge_state(enc: EncoderOutput, w_h: Tensor, b_h: Tensor, w_c: Tensor, b_c: Tensor) -> LSTMState:
    """Decoder initial state: linear maps of the concatenated final encoder states."""
    h = T.linear(T.concat([enc.forward_final.hidden, enc.backward_final.hidden], axis=1), w_h, b_h)
    c = T.linear(T.concat([enc.forward_final.cell, enc.backward_final.cell], axis=1), w_c, b_c)
    return LSTMState(h, c)


def decoder_step(y_prev_embedding: Tensor, state: LSTMState, w: Tensor, b: Tensor) -> LSTMState:
    """Advance the decoder by one token.

    The caller decides which embedding goes in: the reference token under
    teacher forcing, or the previously generated token at inference.
    """
    return lstm_step(y_prev_embedding, state, w, b)
