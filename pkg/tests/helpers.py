"""Rigged decoder sessions and small builders shared by the tests."""

import itertools

import numpy as np

from acvi.data import BOS, EOS


class TableSession:
    """A decoder session whose log-probabilities are a seeded function of the prefix.

    Each distinct prefix gets its own random distribution over ``vocab_size``
    ids, so beam search faces genuinely path-dependent scores.
    """

    def __init__(self, vocab_size: int, seed: int, temperature: float = 1.0):
        self.vocab_size = vocab_size
        self.seed = seed
        self.temperature = temperature

    def initial_state(self):
        return None

    def distribution(self, prefix):
        g = np.random.default_rng([self.seed, len(prefix), *prefix])
        logits = g.standard_normal(self.vocab_size) / self.temperature
        logits = logits - logits.max()
        return logits - np.log(np.exp(logits).sum())

    def step(self, state, token):
        prefix = () if state is None else state + (token,)
        return self.distribution(prefix), prefix


class ForcedSession:
    """Puts all mass on a fixed token sequence followed by EOS."""

    def __init__(self, tokens, vocab_size: int = 8):
        self.tokens = list(tokens) + [EOS]
        self.vocab_size = vocab_size

    def initial_state(self):
        return 0

    def step(self, t, token):
        logp = np.full(self.vocab_size, -np.inf)
        logp[self.tokens[min(t, len(self.tokens) - 1)]] = 0.0
        return logp, t + 1


def exhaustive_best(session, max_len: int):
    """Brute-force argmax over every EOS-terminated sequence of length <= max_len.

    Returns ``(tokens, log_prob)``; equal scores go to the lexicographically
    smaller sequence.
    """
    V = session.vocab_size if hasattr(session, "vocab_size") else None
    best = None
    frontier = [((), session.initial_state(), 0.0)]
    for _ in range(max_len):
        nxt = []
        for tokens, state, lp in frontier:
            prev = tokens[-1] if tokens else BOS
            logp, new_state = session.step(state, prev)
            for tok in range(len(logp) if V is None else V):
                cand = (tokens + (tok,), new_state, lp + float(logp[tok]))
                if tok == EOS:
                    key = (-cand[2], cand[0])
                    if best is None or key < (-best[1], best[0]):
                        best = (cand[0], cand[2])
                else:
                    nxt.append(cand)
        frontier = nxt
    return list(best[0]), best[1]


def all_sequences(vocab, max_len):
    for n in range(1, max_len + 1):
        yield from itertools.product(vocab, repeat=n)


def brute_rouge_n(cand, ref, n):
    """Clipped overlap by explicit per-gram counting."""
    cg = [tuple(cand[i:i + n]) for i in range(len(cand) - n + 1)]
    rg = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
    if not cg or not rg:
        return 0.0, 0.0, 0.0
    overlap = sum(min(cg.count(g), rg.count(g)) for g in set(cg))
    p, r = overlap / len(cg), overlap / len(rg)
    return p, r, (0.0 if p + r == 0 else 2 * p * r / (p + r))


def brute_lcs(a, b):
    """Longest subsequence of ``a`` that is also a subsequence of ``b``, by enumeration."""
    def is_subseq(s, t):
        it = iter(t)
        return all(x in it for x in s)

    for k in range(len(a), 0, -1):
        if any(is_subseq(sub, b) for sub in itertools.combinations(a, k)):
            return k
    return 0
