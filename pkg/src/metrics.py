"""
Answer-quality metrics.

Classification answers are scored by accuracy with macro (or weighted)
recall and F-score. Sentence answers are scored at corpus level by BLEU-1..4,
CIDEr-D (TF-IDF n-gram cosine with a Gaussian length penalty) and an
exact-match METEOR (no stemming or synonym stages).
"""

import math
from collections import Counter
from typing import Hashable, Literal, Sequence

from pydantic import BaseModel

from .errors import EmptyInputError, ShapeError
from .tokenizer import normalize

CIDER_SIGMA = 6.0
CIDER_SCALE = 10.0
CIDER_MAX_N = 4
METEOR_ALPHA = 0.9
METEOR_GAMMA = 0.5
METEOR_BETA = 3.0
ALIGN_NODE_BUDGET = 20_000


# --- classification ---


class ClassCounts(BaseModel):
    tp: int = 0
    fp: int = 0
    fn: int = 0
    support: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f_score(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


class ClassificationReport(BaseModel):
    accuracy: float
    recall: float
    f_score: float
    precision: float
    average: Literal["macro", "weighted"]
    total: int
    per_class: dict[str, ClassCounts]


def classification_report(
    preds: Sequence[Hashable],
    labels: Sequence[Hashable],
    universe: Sequence[Hashable],
    average: Literal["macro", "weighted"] = "macro",
) -> ClassificationReport:
    """
    Accuracy plus recall/precision/F averaged over classes present in ``labels``.

    Args:
        preds: Predicted labels.
        labels: Ground-truth labels, each in ``universe``.
        universe: Closed label set.
        average: ``macro`` (uniform over present classes) or ``weighted`` (by support).
    """
    if len(preds) != len(labels):
        raise ShapeError(f"classification_report: {len(preds)} predictions for {len(labels)} labels")
    if not labels:
        raise EmptyInputError("classification_report: no samples")
    known = set(universe)
    stray = sorted({str(x) for x in list(preds) + list(labels) if x not in known})
    if stray:
        raise ValueError(f"classification_report: labels outside the universe: {stray}")

    counts = {c: ClassCounts() for c in universe}
    for p, y in zip(preds, labels):
        counts[y].support += 1
        if p == y:
            counts[y].tp += 1
        else:
            counts[p].fp += 1
            counts[y].fn += 1

    present = [c for c in universe if counts[c].support > 0]
    if average == "macro":
        weights = {c: 1.0 / len(present) for c in present}
    else:
        weights = {c: counts[c].support / len(labels) for c in present}
    correct = sum(1 for p, y in zip(preds, labels) if p == y)
    return ClassificationReport(
        accuracy=correct / len(labels),
        recall=sum(weights[c] * counts[c].recall for c in present),
        precision=sum(weights[c] * counts[c].precision for c in present),
        f_score=sum(weights[c] * counts[c].f_score for c in present),
        average=average,
        total=len(labels),
        per_class={str(c): counts[c] for c in universe},
    )


# --- n-gram helpers ---


def _tokens(text: str | Sequence[str]) -> list[str]:
    return normalize(text) if isinstance(text, str) else list(text)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _check_corpus(candidates: Sequence, references: Sequence, name: str) -> None:
    if len(candidates) != len(references):
        raise ShapeError(f"{name}: {len(candidates)} candidates for {len(references)} references")
    if not candidates:
        raise EmptyInputError(f"{name}: empty corpus")


# --- BLEU ---


def bleu(
    candidates: Sequence[str | Sequence[str]],
    references: Sequence[str | Sequence[str]],
    max_n: int = 4,
    smoothing: bool = False,
) -> list[float]:
    """
    Corpus BLEU-1..BLEU-``max_n`` with one reference per candidate.

    Clipped n-gram counts are pooled over the corpus; BLEU-k is the brevity
    penalty times the geometric mean of p_1..p_k, and 0 if any p_n is 0.
    With ``smoothing`` p_n for n >= 2 becomes (matches + 1) / (total + 1).
    """
    _check_corpus(candidates, references, "bleu")
    cands = [_tokens(c) for c in candidates]
    refs = [_tokens(r) for r in references]
    matches = [0] * max_n
    totals = [0] * max_n
    for cand, ref in zip(cands, refs):
        for n in range(1, max_n + 1):
            c_grams, r_grams = ngrams(cand, n), ngrams(ref, n)
            matches[n - 1] += sum(min(count, r_grams[g]) for g, count in c_grams.items())
            totals[n - 1] += max(0, len(cand) - n + 1)

    c = sum(len(x) for x in cands)
    r = sum(len(x) for x in refs)
    if c == 0:
        return [0.0] * max_n
    bp = 1.0 if c > r else math.exp(1.0 - r / c)

    precisions = []
    for n in range(max_n):
        if smoothing and n > 0:
            precisions.append((matches[n] + 1) / (totals[n] + 1))
        else:
            precisions.append(matches[n] / totals[n] if totals[n] else 0.0)

    scores = []
    for k in range(1, max_n + 1):
        head = precisions[:k]
        if min(head) <= 0.0:
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(math.fsum(math.log(p) for p in head) / k))
    return scores


# --- CIDEr-D ---


def _tfidf(counts: Counter, df: Counter, log_n: float) -> dict[tuple, float]:
    return {g: tf * (log_n - math.log(max(1.0, df[g]))) for g, tf in counts.items()}


def _norm(vec: dict[tuple, float]) -> float:
    return math.sqrt(sum(v * v for v in vec.values()))


def cider_pair_scores(
    candidates: Sequence[str | Sequence[str]], references: Sequence[str | Sequence[str]]
) -> list[float]:
    """Per-pair CIDEr-D scores (already ×10)."""
    _check_corpus(candidates, references, "cider")
    if len(references) < 2:
        raise EmptyInputError("cider: IDF undefined for a corpus of fewer than 2 references")
    cands = [_tokens(c) for c in candidates]
    refs = [_tokens(r) for r in references]
    log_n = math.log(float(len(refs)))

    df: list[Counter] = [Counter() for _ in range(CIDER_MAX_N)]
    for ref in refs:
        for n in range(1, CIDER_MAX_N + 1):
            df[n - 1].update(ngrams(ref, n).keys())

    scores = []
    for cand, ref in zip(cands, refs):
        delta = float(len(cand) - len(ref))
        penalty = math.exp(-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA))
        per_n = []
        for n in range(1, CIDER_MAX_N + 1):
            vc = _tfidf(ngrams(cand, n), df[n - 1], log_n)
            vr = _tfidf(ngrams(ref, n), df[n - 1], log_n)
            nc, nr = _norm(vc), _norm(vr)
            if nc == 0.0 or nr == 0.0:
                per_n.append(0.0)
                continue
            dot = sum(min(v, vr.get(g, 0.0)) * vr.get(g, 0.0) for g, v in vc.items())
            per_n.append(dot / (nc * nr) * penalty)
        scores.append(CIDER_SCALE * sum(per_n) / CIDER_MAX_N)
    return scores


def cider(candidates: Sequence[str | Sequence[str]], references: Sequence[str | Sequence[str]]) -> float:
    scores = cider_pair_scores(candidates, references)
    return math.fsum(scores) / len(scores)


# --- exact-match METEOR ---


def align(candidate: Sequence[str], reference: Sequence[str]) -> tuple[int, int]:
    """
    (matches, chunks) of the best exact unigram alignment.

    Maximizes the number of matched words, then minimizes the number of
    chunks (runs contiguous in both sentences). The search extends the open
    chunk first, then tries reference positions left to right, and skips
    states (position, previous match, used set) already reached with no more
    chunks. It visits at most ``ALIGN_NODE_BUDGET`` states; past that the
    fewest chunks found so far is returned. The first descent is already a
    complete alignment.
    """
    ref_positions: dict[str, list[int]] = {}
    for j, w in enumerate(reference):
        ref_positions.setdefault(w, []).append(j)
    c_counts, r_counts = Counter(candidate), Counter(reference)
    target = sum(min(c_counts[w], r_counts[w]) for w in c_counts)
    if target == 0:
        return 0, 0

    # matchable candidate positions still ahead of index i
    ahead = [0] * (len(candidate) + 1)
    for i in range(len(candidate) - 1, -1, -1):
        ahead[i] = ahead[i + 1] + (1 if candidate[i] in ref_positions else 0)

    best = [math.inf]
    used: set[int] = set()
    seen: dict[tuple, int] = {}
    nodes = [0]

    def search(i: int, matched: int, chunks: int, prev_j: int | None) -> None:
        if chunks >= best[0] or nodes[0] >= ALIGN_NODE_BUDGET:
            return
        if matched == target:
            best[0] = chunks
            return
        if i == len(candidate) or matched + ahead[i] < target:
            return
        key = (i, prev_j, frozenset(used))
        if seen.get(key, math.inf) <= chunks:
            return
        seen[key] = chunks
        nodes[0] += 1
        options = ref_positions.get(candidate[i], [])
        if prev_j is not None and prev_j + 1 in options:
            options = [prev_j + 1] + [j for j in options if j != prev_j + 1]
        for j in options:
            if j in used:
                continue
            used.add(j)
            new_chunk = 0 if prev_j is not None and j == prev_j + 1 else 1
            search(i + 1, matched + 1, chunks + new_chunk, j)
            used.discard(j)
        search(i + 1, matched, chunks, None)

    search(0, 0, 0, None)
    return target, int(best[0])


def meteor_sentence(candidate: str | Sequence[str], reference: str | Sequence[str]) -> float:
    cand, ref = _tokens(candidate), _tokens(reference)
    matches, chunks = align(cand, ref)
    if matches == 0:
        return 0.0
    precision = matches / len(cand)
    recall = matches / len(ref)
    f_mean = precision * recall / (METEOR_ALPHA * precision + (1.0 - METEOR_ALPHA) * recall)
    penalty = METEOR_GAMMA * (chunks / matches) ** METEOR_BETA
    return f_mean * (1.0 - penalty)


def meteor(candidates: Sequence[str | Sequence[str]], references: Sequence[str | Sequence[str]]) -> float:
    """Corpus mean of sentence-level exact-match METEOR."""
    _check_corpus(candidates, references, "meteor")
    return math.fsum(meteor_sentence(c, r) for c, r in zip(candidates, references)) / len(candidates)


# --- corpus summary ---


class CorpusScores(BaseModel):
    bleu_1: float
    bleu_2: float
    bleu_3: float
    bleu_4: float
    cider: float
    meteor: float
    meteor_variant: str = "exact-match"


def corpus_scores(
    candidates: Sequence[str], references: Sequence[str], bleu_smoothing: bool = False
) -> CorpusScores:
    b = bleu(candidates, references, max_n=4, smoothing=bleu_smoothing)
    # a single-pair corpus has no IDF; report 0 rather than fail the whole evaluation
    c = cider(candidates, references) if len(references) >= 2 else 0.0
    return CorpusScores(bleu_1=b[0], bleu_2=b[1], bleu_3=b[2], bleu_4=b[3], cider=c, meteor=meteor(candidates, references))
