import itertools
import math

import numpy as np

from radgen.metrics import (
    ROUGE_BETA,
    ScoreReport,
    bleu,
    bleu_example,
    lcs_length,
    meteor,
    rouge_l,
    score_corpus,
)


def brute_force_lcs(a, b):
    """Independent LCS oracle: enumerate all subsequences of the shorter list."""
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    best = 0
    for r in range(len(short), 0, -1):
        for combo in itertools.combinations(short, r):
            # check combo is a subsequence of long_
            it = iter(long_)
            if all(tok in it for tok in combo):
                return r
    return best


def random_corpus(rng, size):
    vocab = [f"w{i}" for i in range(10)]
    cands, refs = [], []
    for _ in range(size):
        cands.append(list(rng.choice(vocab, size=rng.integers(1, 20))))
        refs.append(list(rng.choice(vocab, size=rng.integers(1, 20))))
    return cands, refs


class TestBleu:
    def test_identity_scores_one(self):
        cands = [["a", "b", "c", "d", "e"], ["x", "y", "z", "x", "y"]]
        scores = bleu(cands, [list(c) for c in cands])
        assert scores == [1.0, 1.0, 1.0, 1.0]

    def test_clipped_precision_hand_case(self):
        # "the the the the" vs "the cat": one clipped unigram match of four,
        # candidate longer than reference so no brevity penalty
        scores = bleu([["the", "the", "the", "the"]], [["the", "cat"]])
        assert abs(scores[0] - 0.25) < 1e-9
        assert scores[1] == scores[2] == scores[3] == 0.0

    def test_disjoint_vocabulary(self):
        assert bleu([["a", "b"]], [["c", "d"]]) == [0.0, 0.0, 0.0, 0.0]

    def test_empty_candidate_no_exception(self):
        assert bleu([[]], [["a", "b"]]) == [0.0, 0.0, 0.0, 0.0]

    def test_brevity_penalty(self):
        # candidate "a b" vs reference "a b c d": p1 = 1, BP = exp(1 - 4/2)
        scores = bleu([["a", "b"]], [["a", "b", "c", "d"]])
        assert abs(scores[0] - math.exp(-1.0)) < 1e-12

    def test_corpus_order_monotonicity(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            cands, refs = random_corpus(rng, int(rng.integers(1, 8)))
            b1, b2, b3, b4 = bleu(cands, refs)
            assert b1 >= b2 >= b3 >= b4

    def test_bounded(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            cands, refs = random_corpus(rng, 4)
            assert all(0.0 <= s <= 1.0 for s in bleu(cands, refs))

    def test_example_smoothing_no_log_zero(self):
        scores = bleu_example(["a"], [["b"]][0])
        assert all(s >= 0.0 for s in scores)


class TestRougeL:
    def test_identity(self):
        assert rouge_l(["a", "b", "c"], ["a", "b", "c"]) == 1.0

    def test_hand_case_a_c(self):
        # LCS("a c", "a b c") = 2; P = 1, R = 2/3
        candidate, reference = ["a", "c"], ["a", "b", "c"]
        assert lcs_length(candidate, reference) == 2
        precision, recall = 2 / 2, 2 / 3
        expected = ((1 + ROUGE_BETA**2) * precision * recall) / (recall + ROUGE_BETA**2 * precision)
        assert abs(rouge_l(candidate, reference) - expected) < 1e-12

    def test_reversal_lcs_one(self):
        seq = ["a", "b", "c"]
        rev = seq[::-1]
        assert brute_force_lcs(seq, rev) == 1
        assert lcs_length(seq, rev) == 1

    def test_lcs_matches_brute_force(self):
        rng = np.random.default_rng(3)
        vocab = list("abcd")
        for _ in range(30):
            a = list(rng.choice(vocab, size=rng.integers(1, 7)))
            b = list(rng.choice(vocab, size=rng.integers(1, 7)))
            assert lcs_length(a, b) == brute_force_lcs(a, b)

    def test_empty_candidate(self):
        assert rouge_l([], ["a"]) == 0.0

    def test_reorder_sensitivity(self):
        assert rouge_l(["a", "b", "c"], ["c", "b", "a"]) < 1.0


class TestMeteor:
    def test_identity_is_one(self):
        for n in (1, 2, 5, 14):
            seq = [f"t{i}" for i in range(n)]
            assert abs(meteor(seq, list(seq)) - 1.0) < 1e-6

    def test_zero_overlap(self):
        assert meteor(["a", "b"], ["c", "d"]) == 0.0

    def test_fragmentation_penalty(self):
        contiguous = meteor(["a", "b"], ["a", "b"])
        swapped = meteor(["a", "b"], ["b", "a"])
        assert swapped < contiguous
        # hand computation: P = R = 1, F = 1; two chunks of two matches
        expected = 1.0 * (1.0 - 0.5 * (1 / 2) ** 3)
        assert abs(swapped - expected) < 1e-12

    def test_single_chunk_hand_computation(self):
        # "a b" inside "x a b y": P = 1, R = 1/2, one chunk -> no penalty
        precision, recall = 1.0, 0.5
        f_mean = precision * recall / (0.9 * precision + 0.1 * recall)
        assert abs(meteor(["a", "b"], ["x", "a", "b", "y"]) - f_mean) < 1e-12

    def test_bounded(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            cands, refs = random_corpus(rng, 1)
            assert 0.0 <= meteor(cands[0], refs[0]) <= 1.0

    def test_empty_candidate(self):
        assert meteor([], ["a"]) == 0.0


class TestScoreReport:
    def test_schema_six_metrics(self):
        report = score_corpus([["a", "b"]], [["a", "b"]])
        table = report.format_table()
        assert [line.split()[0] for line in table.strip().splitlines()] == list(ScoreReport.METRIC_NAMES)
        assert set(report.to_dict()) == {
            "bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l", "meteor", "per_example"}

    def test_identity_corpus_all_ones(self):
        cands = [["a", "b", "c", "d"], ["e", "f", "g", "e", "f"]]
        report = score_corpus(cands, [list(c) for c in cands])
        assert report.bleu == [1.0, 1.0, 1.0, 1.0]
        assert report.rouge_l == 1.0
        assert abs(report.meteor - 1.0) < 1e-6

    def test_per_example_rows(self):
        report = score_corpus([["a"], ["b"]], [["a"], ["c"]], example_ids=["e1", "e2"])
        assert [row["id"] for row in report.per_example] == ["e1", "e2"]
        assert report.per_example[0]["rouge_l"] == 1.0
        assert report.per_example[1]["rouge_l"] == 0.0
