"""ROUGE-1/2/L and novel-word / OOV-adoption statistics."""

from __future__ import annotations

from collections import Counter
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

Scores = Tuple[float, float, float]  # precision, recall, f1


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int = 1) -> Scores:
    """Clipped n-gram overlap; all zeros when either side has no n-grams."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    cand, ref = ngrams(candidate, n), ngrams(reference, n)
    total_c, total_r = sum(cand.values()), sum(ref.values())
    if not total_c or not total_r:
        return 0.0, 0.0, 0.0
    overlap = sum((cand & ref).values())
    p, r = overlap / total_c, overlap / total_r
    return p, r, _f1(p, r)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> Scores:
    if not candidate or not reference:
        return 0.0, 0.0, 0.0
    lcs = lcs_length(candidate, reference)
    p, r = lcs / len(candidate), lcs / len(reference)
    return p, r, _f1(p, r)


def novel_word_rate(generated: Sequence[str], source: Sequence[str]) -> float:
    """Fraction of generated positions whose token never occurs in the source."""
    if not generated:
        return 0.0
    src = set(source)
    return sum(tok not in src for tok in generated) / len(generated)


def oov_adoption(generated: Sequence[str], source: Sequence[str], vocab) -> int:
    """Number of generated tokens that are source-side OOVs (in the source, not in ``vocab``)."""
    src = set(source)
    return sum(1 for tok in generated if tok in src and tok not in vocab)


def corpus_scores(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[Sequence[str]]],
                  sources: Sequence[Sequence[str]] = (), vocab=None) -> Dict[str, float]:
    """Mean of per-example scores; with several references, each example keeps its best.

    ``references[k]`` is the list of references for example ``k``.
    """
    if len(candidates) != len(references):
        raise ValueError("need one reference list per candidate")
    keys = ("rouge1", "rouge2", "rougeL")
    totals = {f"{k}_{s}": 0.0 for k in keys for s in ("p", "r", "f")}
    for cand, refs in zip(candidates, references):
        for k, fn in zip(keys, (lambda c, r: rouge_n(c, r, 1), lambda c, r: rouge_n(c, r, 2), rouge_l)):
            best = max((fn(cand, ref) for ref in refs), key=lambda s: s[2])
            for s, v in zip(("p", "r", "f"), best):
                totals[f"{k}_{s}"] += v
    n = max(len(candidates), 1)
    out = {k: v / n for k, v in totals.items()}
    if sources:
        out["novel_word_rate"] = sum(novel_word_rate(c, s) for c, s in zip(candidates, sources)) / n
        if vocab is not None:
            out["oov_adoption"] = sum(oov_adoption(c, s, vocab) for c, s in zip(candidates, sources)) / n
    return out


def format_report(metrics: Mapping[str, float]) -> str:
    """``key=value`` lines, sorted by key."""
    lines = []
    for key in sorted(metrics):
        v = metrics[key]
        lines.append(f"{key}={v!r}" if isinstance(v, float) else f"{key}={v}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> Dict[str, str]:
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
