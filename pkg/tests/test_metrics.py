import itertools
import math
import time

import numpy as np
import pytest

from src.errors import EmptyInputError, ShapeError
from src.metrics import (
    align,
    bleu,
    cider,
    cider_pair_scores,
    classification_report,
    corpus_scores,
    meteor,
    meteor_sentence,
)
from src.rng import Rng

WORDS = ["the", "grasper", "is", "idle", "kidney"]


def _random_corpus(rng: Rng, pairs: int) -> tuple[list[list[str]], list[list[str]]]:
    def sentence():
        return [WORDS[int(i)] for i in rng.integers(0, len(WORDS), int(rng.integers(1, 6)))]

    return [sentence() for _ in range(pairs)], [sentence() for _ in range(pairs)]


def _corpora():
    rng = Rng(2024)
    return [_random_corpus(rng.child(k), 2 + k % 4) for k in range(20)]


# --- brute-force references ---


def _grams(tokens, n):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def _bleu_oracle(cands, refs, max_n=4):
    matched, total = [0] * max_n, [0] * max_n
    for cand, ref in zip(cands, refs):
        for n in range(1, max_n + 1):
            cg, rg = _grams(cand, n), _grams(ref, n)
            for g in set(cg):
                matched[n - 1] += min(cg.count(g), rg.count(g))
            total[n - 1] += len(cg)
    c, r = sum(map(len, cands)), sum(map(len, refs))
    bp = 1.0 if c > r else math.exp(1 - r / c)
    out = []
    for k in range(1, max_n + 1):
        ps = [matched[n] / total[n] if total[n] else 0.0 for n in range(k)]
        out.append(0.0 if min(ps) == 0 else bp * float(np.prod(ps)) ** (1.0 / k))
    return out


def _cider_oracle(cands, refs):
    n_docs = len(refs)
    scores = []
    for cand, ref in zip(cands, refs):
        per_n = []
        for n in range(1, 5):
            vocab = sorted(set(_grams(cand, n)) | set(_grams(ref, n)))
            df = np.array([sum(g in set(_grams(r, n)) for r in refs) for g in vocab], dtype=float)
            idf = np.log(n_docs) - np.log(np.maximum(df, 1.0))
            vc = np.array([_grams(cand, n).count(g) for g in vocab], dtype=float) * idf
            vr = np.array([_grams(ref, n).count(g) for g in vocab], dtype=float) * idf
            denom = np.linalg.norm(vc) * np.linalg.norm(vr)
            if denom == 0:
                per_n.append(0.0)
                continue
            penalty = math.exp(-((len(cand) - len(ref)) ** 2) / (2 * 36.0))
            per_n.append(float(np.minimum(vc, vr) @ vr) / denom * penalty)
        scores.append(10.0 * sum(per_n) / 4)
    return sum(scores) / len(scores)


def _meteor_oracle(cand, ref):
    """Enumerate every injective word alignment; most matches, then fewest chunks."""
    options = [[None] + [j for j, w in enumerate(ref) if w == c] for c in cand]
    best = (0, 0)
    for choice in itertools.product(*options):
        picked = [j for j in choice if j is not None]
        if len(set(picked)) != len(picked):
            continue
        chunks, prev = 0, None
        for j in choice:
            if j is not None and not (prev is not None and j == prev + 1):
                chunks += 1
            prev = j
        if (len(picked), -chunks) > (best[0], -best[1]):
            best = (len(picked), chunks)
    matches, chunks = best
    if matches == 0:
        return 0.0
    p, r = matches / len(cand), matches / len(ref)
    return 10 * p * r / (r + 9 * p) * (1 - 0.5 * (chunks / matches) ** 3)


class TestClassification:
    def test_perfect(self):
        report = classification_report(["a", "b", "c"], ["a", "b", "c"], ["a", "b", "c", "d"])
        assert (report.accuracy, report.recall, report.f_score) == (1.0, 1.0, 1.0)

    def test_binary_example(self):
        report = classification_report(["a", "b", "b", "b"], ["a", "a", "b", "b"], ["a", "b"])
        assert report.accuracy == pytest.approx(0.75)
        assert report.recall == pytest.approx(0.75)
        assert report.f_score == pytest.approx((2 / 3 + 0.8) / 2)
        assert report.per_class["a"].model_dump() == {"tp": 1, "fp": 0, "fn": 1, "support": 2}
        assert report.per_class["b"].fp == 1

    def test_macro_ignores_absent_classes(self):
        report = classification_report(["a", "c"], ["a", "a"], ["a", "b", "c"])
        assert report.recall == pytest.approx(0.5)
        assert report.per_class["c"].fp == 1

    def test_weighted_average(self):
        preds, labels = ["a", "a", "a", "a"], ["a", "a", "a", "b"]
        report = classification_report(preds, labels, ["a", "b"], average="weighted")
        assert report.recall == pytest.approx(0.75 * 1.0 + 0.25 * 0.0)

    def test_macro_f_below_best_class(self):
        report = classification_report(["a", "b", "b", "c"], ["a", "a", "b", "c"], ["a", "b", "c"])
        assert report.f_score <= max(c.f_score for c in report.per_class.values())

    def test_errors(self):
        with pytest.raises(EmptyInputError):
            classification_report([], [], ["a"])
        with pytest.raises(ShapeError):
            classification_report(["a"], ["a", "a"], ["a"])
        with pytest.raises(ValueError, match="universe"):
            classification_report(["z"], ["a"], ["a"])


class TestBleu:
    def test_identical_corpus(self):
        corpus = ["the grasper is grasping the tissue", "the organ being operated is kidney"]
        assert bleu(corpus, corpus)[3] == pytest.approx(1.0)

    def test_no_shared_four_grams(self):
        assert bleu(["a b c d e"], ["a b c x d e"])[3] == 0.0

    def test_brevity_example(self):
        scores = bleu(["the cat sat"], ["the cat sat down"], max_n=3)
        assert scores[2] == pytest.approx(math.exp(1 - 4 / 3))
        assert scores[2] == pytest.approx(0.7165, abs=1e-4)

    def test_smoothing_rescues_zero_precision(self):
        assert bleu(["a b x"], ["a c b"], smoothing=True)[1] > 0.0
        assert bleu(["a b x"], ["a c b"])[1] == 0.0

    def test_errors(self):
        with pytest.raises(EmptyInputError):
            bleu([], [])
        with pytest.raises(ShapeError):
            bleu(["a"], ["a", "b"])

    def test_matches_brute_force(self):
        for cands, refs in _corpora():
            np.testing.assert_allclose(bleu(cands, refs), _bleu_oracle(cands, refs), atol=1e-9)

    def test_matches_nltk(self):
        nltk_bleu = pytest.importorskip("nltk.translate.bleu_score")
        cands = ["the grasper is grasping the tissue now", "the organ being operated is the kidney"]
        refs = ["the grasper is grasping the tissue", "the organ being operated is kidney"]
        ours = bleu(cands, refs)[3]
        theirs = nltk_bleu.corpus_bleu([[r.split()] for r in refs], [c.split() for c in cands])
        assert ours == pytest.approx(theirs, abs=1e-9)


class TestCider:
    def test_disjoint_identical_pairs_score_ten(self):
        refs = ["the grasper is idle", "a kidney being operated"]
        assert cider(refs, refs) == pytest.approx(10.0)

    def test_no_overlap_contributes_zero(self):
        scores = cider_pair_scores(["x y z", "the grasper is idle"], ["a b c", "the grasper is idle"])
        assert scores[0] == 0.0
        assert scores[1] > 0.0

    def test_order_invariant(self):
        cands = ["the grasper is idle", "kidney", "the hook is cutting the tissue"]
        refs = ["the grasper is idle now", "the kidney", "the hook is cutting tissue"]
        order = [2, 0, 1]
        assert cider(cands, refs) == pytest.approx(cider([cands[i] for i in order], [refs[i] for i in order]), abs=1e-12)

    def test_single_pair_rejected(self):
        with pytest.raises(EmptyInputError, match="IDF undefined"):
            cider(["a"], ["a"])

    def test_matches_brute_force(self):
        for cands, refs in _corpora():
            assert cider(cands, refs) == pytest.approx(_cider_oracle(cands, refs), abs=1e-9)


class TestMeteor:
    def test_identical_four_words(self):
        assert meteor_sentence("the grasper is idle", "the grasper is idle") == pytest.approx(0.9921875)

    def test_zero_matches(self):
        assert meteor_sentence("a b", "c d") == 0.0

    def test_permutation_scores_lower(self):
        ref = "the grasper is idle"
        assert meteor_sentence("idle is grasper the", ref) < meteor_sentence(ref, ref)

    def test_alignment_prefers_fewer_chunks(self):
        # "a" could align to either reference "a"; the second one keeps a single chunk
        assert align(["a", "b"], ["a", "x", "a", "b"]) == (2, 1)

    def test_repeated_words_match_brute_force(self):
        rng = Rng(7)
        for _ in range(10):
            cand = [["a", "b"][int(i)] for i in rng.integers(0, 2, 6)]
            ref = [["a", "b"][int(i)] for i in rng.integers(0, 2, 6)]
            assert meteor_sentence(cand, ref) == pytest.approx(_meteor_oracle(cand, ref), abs=1e-9)

    def test_long_repetitive_sentence_is_fast(self):
        rng = Rng(11)
        cand = [["a", "b", "c"][int(i)] for i in rng.integers(0, 3, 20)]
        ref = [cand[int(i)] for i in rng.permutation(20)]
        start = time.perf_counter()
        matches, chunks = align(cand, ref)
        assert time.perf_counter() - start < 1.0
        assert matches == 20
        assert 1 <= chunks <= 20

    def test_corpus_mean(self):
        cands, refs = ["a b c d", "x"], ["a b c d", "y"]
        assert meteor(cands, refs) == pytest.approx(0.9921875 / 2)

    def test_matches_brute_force(self):
        for cands, refs in _corpora():
            for c, r in zip(cands, refs):
                assert meteor_sentence(c, r) == pytest.approx(_meteor_oracle(c, r), abs=1e-9)


class TestCorpusScores:
    def test_fields(self):
        cands = ["the grasper is idle", "the organ being operated is kidney"]
        scores = corpus_scores(cands, cands)
        assert scores.bleu_4 == pytest.approx(1.0)
        assert scores.cider == pytest.approx(10.0)
        assert scores.meteor_variant == "exact-match"

    def test_single_pair_reports_zero_cider(self):
        assert corpus_scores(["the grasper is idle"], ["the grasper is idle"]).cider == 0.0

    def test_pure(self):
        cands, refs = _corpora()[3]
        assert corpus_scores(cands, refs) == corpus_scores(cands, refs)

    def test_bleu_counts_pooled(self):
        # clipped unigram precision 1/3, brevity penalty 1
        assert bleu(["a a a"], ["a"], max_n=1)[0] == pytest.approx(1 / 3)
