"""
Transformer decoder for sentence answers, with teacher-forced training and
beam-search generation.

Each decoder layer is post-norm: causal self-attention, cross-attention over
the (pad-masked) encoder memory, then a GeLU feed-forward block. Output
logits reuse the token embedding table (weight tying, no bias).
"""

from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np
from pydantic import BaseModel, model_validator

from . import numeric as nm
from .errors import ContractError, ShapeError
from .layers import Embedding, LayerNorm, Linear, Module, MultiHeadAttention
from .numeric import Tensor
from .rng import Rng
from .tokenizer import DEFAULT_VOCAB_SIZE, END_ID, PAD_ID, START_ID


class DecoderConfig(BaseModel):
    vocab_size: int = DEFAULT_VOCAB_SIZE
    num_layers: int = 6
    d_model: int = 300
    num_heads: int = 6
    ffn_hidden: int = 2048
    max_answer_len: int = 20
    dropout: float = 0.1
    memory: Literal["final", "self_attention"] = "final"

    @model_validator(mode="after")
    def _check_dims(self):
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by num_heads {self.num_heads}")
        if self.max_answer_len < 1:
            raise ValueError(f"max_answer_len must be >= 1, got {self.max_answer_len}")
        return self


class GenerationConfig(BaseModel):
    beam_width: int = 3
    max_answer_len: int = 20
    length_penalty: float = 0.0

    @model_validator(mode="after")
    def _check(self):
        if self.beam_width < 1:
            raise ValueError(f"beam_width must be >= 1, got {self.beam_width}")
        if self.max_answer_len < 1:
            raise ValueError(f"max_answer_len must be >= 1, got {self.max_answer_len}")
        return self


@dataclass
class BeamHypothesis:
    ids: list[int] = field(default_factory=lambda: [START_ID])
    log_prob: float = 0.0
    finished: bool = False

    def score(self, length_penalty: float = 0.0) -> float:
        if length_penalty == 0.0:
            return self.log_prob
        return self.log_prob / max(1, len(self.ids) - 1) ** length_penalty

    def answer_ids(self) -> list[int]:
        """Ids without the leading ``[start]`` and trailing ``[end]``."""
        ids = self.ids[1:]
        return ids[:-1] if ids and ids[-1] == END_ID else ids


# --- network ---


class DecoderLayer(Module):
    def __init__(self, config: DecoderConfig, rng: Rng):
        super().__init__()
        d = config.d_model
        self.dropout = config.dropout
        self._rng = rng.child("dropout")
        self.self_attention = MultiHeadAttention(d, config.num_heads, rng.child("self_attention"), config.dropout)
        self.self_attention_norm = LayerNorm(d)
        self.cross_attention = MultiHeadAttention(d, config.num_heads, rng.child("cross_attention"), config.dropout)
        self.cross_attention_norm = LayerNorm(d)
        self.intermediate = Linear(d, config.ffn_hidden, rng.child("intermediate"))
        self.output = Linear(config.ffn_hidden, d, rng.child("output"))
        self.output_norm = LayerNorm(d)

    def _drop(self, x: Tensor) -> Tensor:
        return nm.dropout(x, self.dropout, self._rng, self.training)

    def forward(self, x: Tensor, memory: Tensor, memory_mask: np.ndarray) -> Tensor:
        x = self.self_attention_norm(x + self._drop(self.self_attention(x, x, causal=True)))
        x = self.cross_attention_norm(x + self._drop(self.cross_attention(x, memory, key_mask=memory_mask)))
        return self.output_norm(x + self._drop(self.output(nm.gelu(self.intermediate(x)))))


class AnswerDecoder(Module):
    def __init__(self, config: DecoderConfig, rng: Rng):
        super().__init__()
        self.config = config
        self.token_embeddings = Embedding(config.vocab_size, config.d_model, rng.child("token_embeddings"))
        self.position_embeddings = Embedding(config.max_answer_len, config.d_model, rng.child("position_embeddings"))
        self.layers = [DecoderLayer(config, rng.child(f"layer{i}")) for i in range(config.num_layers)]

    def forward(self, memory: Tensor, memory_mask: np.ndarray, target_ids: np.ndarray) -> Tensor:
        """Logits [B, T, vocab] for every prefix of ``target_ids`` [B, T]."""
        target_ids = np.atleast_2d(np.asarray(target_ids, dtype=np.int64))
        b, t = target_ids.shape
        if t > self.config.max_answer_len:
            raise ShapeError(f"target length {t} exceeds max_answer_len {self.config.max_answer_len}")
        positions = np.broadcast_to(np.arange(t), (b, t))
        x = self.token_embeddings(target_ids) + self.position_embeddings(positions)
        for layer in self.layers:
            x = layer(x, memory, memory_mask)
        return x @ self.token_embeddings.weight.transpose()


def decode_train(decoder: AnswerDecoder, memory: Tensor, memory_mask: np.ndarray, target_ids: np.ndarray) -> Tensor:
    """Teacher-forced logits; every target row must start with ``[start]``."""
    target_ids = np.atleast_2d(np.asarray(target_ids, dtype=np.int64))
    if target_ids.shape[1] == 0 or np.any(target_ids[:, 0] != START_ID):
        raise ContractError("decode_train: every target sequence must begin with [start]")
    return decoder(memory, memory_mask, target_ids)


def sequence_loss(logits: Tensor, target_ids: np.ndarray) -> Tensor:
    """Cross-entropy of position t against token t+1; ``[PAD]`` targets are ignored."""
    target_ids = np.atleast_2d(np.asarray(target_ids, dtype=np.int64))
    b, t, v = logits.shape
    if t < 2:
        raise ShapeError(f"sequence_loss needs at least 2 target positions, got {t}")
    flat = logits[:, : t - 1, :].reshape(b * (t - 1), v)
    return nm.cross_entropy(flat, target_ids[:, 1:].reshape(-1), ignore_index=PAD_ID)


# --- search ---

StepFn = Callable[[list[list[int]]], np.ndarray]


def _ranked(log_probs: np.ndarray, k: int) -> np.ndarray:
    """Top-k token ids by log-probability; equal scores keep the lower id first."""
    return np.argsort(-log_probs, kind="stable")[:k]


def greedy_steps(next_log_probs: StepFn, max_answer_len: int) -> BeamHypothesis:
    hyp = BeamHypothesis()
    for _ in range(max_answer_len - 1):
        lp = next_log_probs([hyp.ids])[0]
        token = int(np.argmax(lp))
        hyp = BeamHypothesis(hyp.ids + [token], hyp.log_prob + float(lp[token]), token == END_ID)
        if hyp.finished:
            break
    return hyp


def beam_search_steps(
    next_log_probs: StepFn,
    beam_width: int,
    max_answer_len: int,
    length_penalty: float = 0.0,
) -> BeamHypothesis:
    """
    Beam search over any next-token distribution.

    Args:
        next_log_probs: Maps a list of id prefixes (each starting with
            ``[start]``) to a [len(prefixes), vocab] array of log-probabilities.
        beam_width: Hypotheses kept per step.
        max_answer_len: Maximum hypothesis length including ``[start]``.
        length_penalty: Exponent for length normalization when ranking
            finished hypotheses; 0 ranks by raw cumulative log-probability.

    Returns:
        The best finished hypothesis, or the best live one if none finished.
        With ``length_penalty == 0`` and ``beam_width > 1`` the greedy
        sequence replaces that result when it finished and the result did
        not, or when both agree on finishing and greedy scores strictly
        higher. An unfinished greedy run never replaces a finished one.
    """
    if beam_width < 1:
        raise ValueError(f"beam_width must be >= 1, got {beam_width}")
    beams = [BeamHypothesis()]
    for _ in range(max_answer_len - 1):
        live = [h for h in beams if not h.finished]
        if not live:
            break
        lp = next_log_probs([h.ids for h in live])
        pool = [h for h in beams if h.finished]
        for row, hyp in enumerate(live):
            for token in _ranked(lp[row], beam_width):
                token = int(token)
                pool.append(BeamHypothesis(hyp.ids + [token], hyp.log_prob + float(lp[row, token]), token == END_ID))
        pool.sort(key=lambda h: (-h.log_prob, h.ids))
        beams = pool[:beam_width]

    finished = [h for h in beams if h.finished]
    candidates = finished or beams
    best = min(candidates, key=lambda h: (-h.score(length_penalty), h.ids))
    if beam_width > 1 and length_penalty == 0.0:
        greedy = greedy_steps(next_log_probs, max_answer_len)
        if (greedy.finished, greedy.log_prob) > (best.finished, best.log_prob):
            return greedy
    return best


def decoder_step_fn(decoder: AnswerDecoder, memory: Tensor, memory_mask: np.ndarray) -> StepFn:
    """Step function scoring prefixes against one encoded query (memory batch of 1)."""

    def step(prefixes: list[list[int]]) -> np.ndarray:
        ids = np.asarray(prefixes, dtype=np.int64)
        k = ids.shape[0]
        mem = nm.as_tensor(np.repeat(memory.data, k, axis=0))
        mask = np.repeat(np.asarray(memory_mask), k, axis=0)
        with nm.no_grad():
            logits = decoder(mem, mask, ids)
            return nm.log_softmax(logits[:, -1, :], axis=-1).data

    return step


def beam_search(
    decoder: AnswerDecoder, memory: Tensor, memory_mask: np.ndarray, gen: GenerationConfig
) -> list[int]:
    """Answer token ids (without ``[start]``/``[end]``) for a single query."""
    if memory.shape[0] != 1:
        raise ShapeError(f"beam_search decodes one query at a time, got batch {memory.shape[0]}")
    max_len = min(gen.max_answer_len, decoder.config.max_answer_len)
    step = decoder_step_fn(decoder, memory, memory_mask)
    return beam_search_steps(step, gen.beam_width, max_len, gen.length_penalty).answer_ids()


def greedy_decode(decoder: AnswerDecoder, memory: Tensor, memory_mask: np.ndarray, max_answer_len: int) -> list[int]:
    step = decoder_step_fn(decoder, memory, memory_mask)
    return greedy_steps(step, min(max_answer_len, decoder.config.max_answer_len)).answer_ids()


def sequence_log_prob(next_log_probs: StepFn, ids: Sequence[int]) -> float:
    """Cumulative log-probability of a full id sequence starting with ``[start]``."""
    total = 0.0
    for t in range(1, len(ids)):
        total += float(next_log_probs([list(ids[:t])])[0, ids[t]])
    return total
