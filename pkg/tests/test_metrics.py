"""ROUGE-N, ROUGE-L, novel-word and OOV-adoption statistics."""

import pytest
from hypothesis import given
from hypothesis import strategies as st

from acvi.data import Vocabulary
from acvi.metrics import (corpus_scores, format_report, lcs_length, novel_word_rate, oov_adoption, parse_report,
                          rouge_l, rouge_n)

from helpers import brute_lcs, brute_rouge_n

seqs = st.lists(st.sampled_from("a b c d".split()), min_size=0, max_size=7)


class TestRougeN:
    @pytest.mark.parametrize("n", [1, 2])
    def test_identical(self, n):
        assert rouge_n("a b c".split(), "a b c".split(), n) == (1.0, 1.0, 1.0)

    def test_disjoint(self):
        assert rouge_n(["a", "b"], ["c", "d"]) == (0.0, 0.0, 0.0)

    def test_clipped_overlap(self):
        p, r, f = rouge_n("a b a".split(), "a a c".split(), 1)
        assert p == pytest.approx(2 / 3) and r == pytest.approx(2 / 3) and f == pytest.approx(2 / 3)

    def test_empty(self):
        assert rouge_n([], ["a"]) == (0.0, 0.0, 0.0)
        assert rouge_n(["a"], ["a"], 2) == (0.0, 0.0, 0.0)

    def test_invalid_n(self):
        with pytest.raises(ValueError):
            rouge_n(["a"], ["a"], 0)

    @given(seqs, seqs, st.integers(1, 3))
    def test_brute_force_oracle(self, cand, ref, n):
        assert rouge_n(cand, ref, n) == pytest.approx(brute_rouge_n(cand, ref, n), abs=1e-12)

    @given(seqs, seqs, st.integers(1, 2))
    def test_swap_symmetry_and_range(self, cand, ref, n):
        p, r, f = rouge_n(cand, ref, n)
        p2, r2, f2 = rouge_n(ref, cand, n)
        assert (p, r) == (r2, p2) and f == pytest.approx(f2)
        assert all(0 <= v <= 1 for v in (p, r, f))


class TestRougeL:
    def test_identical(self):
        assert rouge_l(["x", "y"], ["x", "y"]) == (1.0, 1.0, 1.0)

    def test_empty_candidate(self):
        assert rouge_l([], ["a"]) == (0.0, 0.0, 0.0)

    def test_hand_example(self):
        cand, ref = "a c b d".split(), "a b c d".split()
        assert lcs_length(cand, ref) == 3 == brute_lcs(cand, ref)
        assert rouge_l(cand, ref) == pytest.approx((0.75, 0.75, 0.75))

    @given(seqs, seqs)
    def test_lcs_matches_enumeration(self, a, b):
        assert lcs_length(a, b) == brute_lcs(a, b)

    @given(seqs, seqs)
    def test_swap_symmetry_and_range(self, cand, ref):
        p, r, f = rouge_l(cand, ref)
        p2, r2, _ = rouge_l(ref, cand)
        assert (p, r) == (r2, p2) and 0 <= f <= 1


class TestCorpusStatistics:
    def test_novel_rate_bounds(self):
        assert novel_word_rate(["a", "b"], ["b", "a", "c"]) == 0.0
        assert novel_word_rate(["x", "y"], ["a"]) == 1.0
        assert novel_word_rate([], ["a"]) == 0.0

    def test_hand_example(self):
        vocab = Vocabulary(["a", "b"])
        assert novel_word_rate(["a", "q", "b"], ["a", "b"]) == pytest.approx(1 / 3)
        assert oov_adoption(["a", "q", "b"], ["a", "q", "b"], vocab) == 1
        assert oov_adoption(["a", "q", "b"], ["a", "b"], vocab) == 0

    def test_corpus_mean_of_examples(self):
        cands = [["a", "b"], ["c"]]
        refs = [[["a", "b"]], [["d"]]]
        out = corpus_scores(cands, refs)
        assert out["rouge1_f"] == pytest.approx(0.5) and out["rougeL_p"] == pytest.approx(0.5)

    def test_multi_reference_takes_best(self):
        out = corpus_scores([["a", "b"]], [[["c"], ["a", "b"], ["a"]]])
        assert out["rouge1_f"] == 1.0 and out["rouge2_f"] == 1.0

    def test_oov_adoption_is_mean_count(self):
        vocab = Vocabulary(["a"])
        out = corpus_scores([["q", "z"], ["a"]], [[["q"]], [["a"]]], [["q", "z"], ["a"]], vocab)
        assert out["oov_adoption"] == 1.0 and out["novel_word_rate"] == 0.0

    def test_mismatched_lengths(self):
        with pytest.raises(ValueError):
            corpus_scores([["a"]], [])


class TestReport:
    def test_round_trip(self):
        metrics = {"rouge1_f": 0.123456789, "n_examples": 3, "b": 1.0}
        text = format_report(metrics)
        assert text.splitlines()[0].startswith("b=")
        parsed = parse_report(text)
        assert float(parsed["rouge1_f"]) == metrics["rouge1_f"] and parsed["n_examples"] == "3"
