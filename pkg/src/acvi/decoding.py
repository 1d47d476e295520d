"""Greedy and beam-search decoding.

Decoders talk to a *session*: any object with ``initial_state()`` and
``step(state, token) -> (log_probs, next_state)``, where ``log_probs`` covers
the extended vocabulary and ``token`` is the previously emitted id (BOS on the
first call).  :class:`acvi.model.DecoderSession` is the production session.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, List, Optional

import numpy as np

from .data import BOS, EOS


@dataclass
class BeamHypothesis:
    tokens: List[int]
    log_prob: float
    state: Any = None
    finished: bool = False

    def score(self, length_norm: bool = False) -> float:
        if length_norm and self.tokens:
            return self.log_prob / len(self.tokens)
        return self.log_prob

    def key(self, length_norm: bool = False):
        # sort ascending: best score first, then the lexicographically smaller sequence
        return (-self.score(length_norm), tuple(self.tokens))


def _check(width: int, max_len: int) -> None:
    if width < 1 or max_len < 1:
        raise ValueError(f"width and max_len must be >= 1 (got {width}, {max_len})")


def greedy_decode(session, max_len: int) -> BeamHypothesis:
    """Argmax at every step (ties to the smallest id) until EOS or ``max_len`` tokens."""
    _check(1, max_len)
    state = session.initial_state()
    tokens: List[int] = []
    total = 0.0
    prev = BOS
    for _ in range(max_len):
        logp, state = session.step(state, prev)
        tok = int(np.argmax(logp))
        total += float(logp[tok])
        tokens.append(tok)
        if tok == EOS:
            return BeamHypothesis(tokens, total, state, True)
        prev = tok
    return BeamHypothesis(tokens, total, state, False)


def beam_search(session, width: int = 5, max_len: int = 40, length_norm: bool = False) -> BeamHypothesis:
    """Standard beam search with a finished pool.

    Each live hypothesis is expanded over the full output distribution and the
    best ``width`` candidates survive; candidates ending in EOS move to the
    finished pool.  Without length normalisation the search stops early once no
    live hypothesis can beat the best finished one.
    """
    _check(width, max_len)
    live = [BeamHypothesis([], 0.0, session.initial_state())]
    finished: List[BeamHypothesis] = []
    for _ in range(max_len):
        candidates = []
        for hyp in live:
            prev = hyp.tokens[-1] if hyp.tokens else BOS
            logp, state = session.step(hyp.state, prev)
            # a hypothesis contributes at most `width` survivors; pick them with the same tie rule
            order = np.lexsort((np.arange(len(logp)), -logp))[:width]
            for tok in order:
                tok = int(tok)
                candidates.append(BeamHypothesis(hyp.tokens + [tok], hyp.log_prob + float(logp[tok]),
                                                 state, tok == EOS))
        candidates.sort(key=lambda h: h.key(length_norm))
        live = []
        for cand in candidates[:width]:
            (finished if cand.finished else live).append(cand)
        if not live:
            break
        if finished and not length_norm:
            best_done = max(h.log_prob for h in finished)
            if max(h.log_prob for h in live) < best_done:
                break
    pool = finished if finished else live
    return min(pool, key=lambda h: h.key(length_norm))
