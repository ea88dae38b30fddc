"""
WordPiece-style subword tokenizer trained on the QA corpus.

The vocabulary starts with six special tokens in a fixed order, followed by
the character alphabet (word-initial characters and ``##`` continuations),
whole words seen at least ``min_freq`` times, and finally subwords built by
greedy pair merges over the words not already covered.
"""

import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

from pydantic import BaseModel, model_validator

from .errors import EmptyInputError, TargetIndexError

PAD, UNK, CLS, SEP, START, END = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[start]", "[end]"
SPECIAL_TOKENS = [PAD, UNK, CLS, SEP, START, END]
PAD_ID, UNK_ID, CLS_ID, SEP_ID, START_ID, END_ID = range(6)
CONTINUATION = "##"
PUNCTUATION = ".,?!"
DEFAULT_VOCAB_SIZE = 1000
MAX_WORD_CHARS = 100

_SPLIT_RE = re.compile(r"[^\s.,?!]+|[.,?!]")


class Vocab:
    """Token <-> id bijection; the first six ids are the special tokens."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ValueError(f"vocab must start with {SPECIAL_TOKENS}")
        dupes = sorted(t for t, c in Counter(tokens).items() if c > 1)
        if dupes:
            raise ValueError(f"duplicate vocab tokens: {dupes[:10]}")
        self.tokens = tokens
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n"))


class EncodedText(BaseModel):
    """Token ids plus the segment/position/mask streams the embeddings consume."""

    ids: list[int]
    segment_ids: list[int]
    position_ids: list[int]
    attention_mask: list[int]

    @model_validator(mode="after")
    def _lengths_agree(self):
        n = len(self.ids)
        if not (len(self.segment_ids) == len(self.position_ids) == len(self.attention_mask) == n):
            raise ValueError("ids, segment_ids, position_ids and attention_mask must have equal length")
        return self

    @property
    def num_real(self) -> int:
        return sum(self.attention_mask)


def normalize(text: str, lowercase: bool = True) -> list[str]:
    """Lowercase (optionally) and split on whitespace and ``.,?!``."""
    if lowercase:
        text = text.lower()
    return _SPLIT_RE.findall(text)


def _word_units(word: str) -> list[str]:
    return [word[0]] + [CONTINUATION + c for c in word[1:]]


def _merge_pair(a: str, b: str) -> str:
    return a + b[len(CONTINUATION):]


def train_vocab(
    corpus: Iterable[str],
    target_size: int = DEFAULT_VOCAB_SIZE,
    min_freq: int = 2,
    lowercase: bool = True,
) -> Vocab:
    """
    Train a vocabulary on ``corpus``.

    Args:
        corpus: Text lines (questions, answers, labels).
        target_size: Maximum vocabulary size, specials included.
        min_freq: Minimum count for whole words and for pair merges.
        lowercase: Lowercase before splitting.

    Returns:
        The trained Vocab. Deterministic given the corpus; ties are broken
        lexicographically.
    """
    lines = [line for line in corpus]
    if not lines or not any(line.strip() for line in lines):
        raise EmptyInputError("train_vocab: corpus is empty")

    word_freq: Counter[str] = Counter()
    for line in lines:
        word_freq.update(normalize(line, lowercase))

    alphabet = sorted({u for w in word_freq for u in _word_units(w)})
    minimum = len(SPECIAL_TOKENS) + len(alphabet)
    if target_size <= minimum:
        raise ValueError(f"train_vocab: target_size {target_size} must exceed {minimum} (specials + alphabet)")

    tokens = list(SPECIAL_TOKENS) + alphabet
    present = set(tokens)

    whole = sorted((w for w, c in word_freq.items() if c >= min_freq), key=lambda w: (-word_freq[w], w))
    for word in whole:
        if len(tokens) >= target_size:
            break
        if word not in present:
            tokens.append(word)
            present.add(word)

    # residual words are segmented into units and merged pairwise
    pieces = {w: _word_units(w) for w in sorted(word_freq) if w not in present}
    while len(tokens) < target_size and pieces:
        pair_freq: Counter[tuple[str, str]] = Counter()
        for word, units in pieces.items():
            for a, b in zip(units, units[1:]):
                pair_freq[(a, b)] += word_freq[word]
        candidates = [(c, _merge_pair(*p), p) for p, c in pair_freq.items() if c >= min_freq]
        if not candidates:
            break
        _, merged, best = min(candidates, key=lambda t: (-t[0], t[1], t[2]))
        if merged not in present:
            tokens.append(merged)
            present.add(merged)
        for word, units in pieces.items():
            out, i = [], 0
            while i < len(units):
                if i + 1 < len(units) and (units[i], units[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(units[i])
                    i += 1
            pieces[word] = out
        pieces = {w: u for w, u in pieces.items() if len(u) > 1}
    return Vocab(tokens)


def wordpiece(word: str, vocab: Vocab) -> list[int]:
    """Greedy longest-match-first segmentation; an unsegmentable word is ``[UNK]``."""
    if len(word) > MAX_WORD_CHARS:
        return [UNK_ID]
    ids, start = [], 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            piece = word[start:end] if start == 0 else CONTINUATION + word[start:end]
            if piece in vocab:
                match = vocab.token_to_id[piece]
                break
            end -= 1
        if match is None:
            return [UNK_ID]
        ids.append(match)
        start = end
    return ids


def tokenize(text: str, vocab: Vocab, lowercase: bool = True) -> list[int]:
    ids: list[int] = []
    for word in normalize(text, lowercase):
        ids.extend(wordpiece(word, vocab))
    return ids


def _pack(ids: list[int], max_len: int) -> EncodedText:
    n = len(ids)
    return EncodedText(
        ids=ids + [PAD_ID] * (max_len - n),
        segment_ids=[0] * max_len,
        position_ids=list(range(max_len)),
        attention_mask=[1] * n + [0] * (max_len - n),
    )


def encode(text: str, vocab: Vocab, max_len: int, lowercase: bool = True) -> EncodedText:
    """``[CLS] pieces [SEP]`` padded/truncated to ``max_len``."""
    if max_len < 3:
        raise ValueError(f"encode: max_len must be >= 3, got {max_len}")
    pieces = tokenize(text, vocab, lowercase)[: max_len - 2]
    return _pack([CLS_ID] + pieces + [SEP_ID], max_len)


def encode_target(text: str, vocab: Vocab, max_len: int, lowercase: bool = True) -> EncodedText:
    """``[start] pieces [end]`` padded/truncated to ``max_len`` (the answer stream)."""
    if max_len < 2:
        raise ValueError(f"encode_target: max_len must be >= 2, got {max_len}")
    pieces = tokenize(text, vocab, lowercase)[: max_len - 2]
    return _pack([START_ID] + pieces + [END_ID], max_len)


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    """Strip specials and pads, fuse ``##`` continuations, join with single spaces."""
    words: list[str] = []
    skip = {PAD_ID, UNK_ID, CLS_ID, SEP_ID, START_ID, END_ID}
    for i in ids:
        i = int(i)
        if i < 0 or i >= len(vocab):
            raise TargetIndexError(f"decode: id {i} outside vocab of size {len(vocab)}")
        if i in skip:
            continue
        token = vocab.tokens[i]
        if token.startswith(CONTINUATION) and words:
            words[-1] += token[len(CONTINUATION):]
        else:
            words.append(token)
    return " ".join(words)


def build_corpus(qa_records: Iterable[dict]) -> list[str]:
    """Questions and answers of every QA record, in input order."""
    lines: list[str] = []
    for record in qa_records:
        lines.append(record["question"])
        lines.append(str(record["answer"]))
    return lines
