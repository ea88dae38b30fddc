"""
Full VQA model: feature extractor -> visual tokens -> vision-text encoder ->
classification head or sentence decoder.
"""

from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, model_validator

from . import numeric as nm
from .decoder import AnswerDecoder, DecoderConfig, GenerationConfig, beam_search, decode_train, sequence_loss
from .encoder import EncoderConfig, EncoderOutput, VisualTextEncoder
from .errors import ContractError
from .layers import Module
from .numeric import Tensor
from .rng import Rng
from .tokenizer import Vocab, decode, encode
from .vision import (
    DEFAULT_WIDTHS,
    FeatureExtractor2D,
    FeatureExtractor3D,
    Image,
    VisualTokens,
    adaptive_avg_pool,
    stack_clips,
    stack_images,
    to_visual_tokens,
)


class ModelConfig(BaseModel):
    mode: Literal["classification", "sentence"] = "classification"
    temporal: bool = False
    patches: int = 2
    cnn_widths: tuple[int, int, int] = DEFAULT_WIDTHS
    max_question_len: int = 24
    encoder: EncoderConfig = EncoderConfig()
    decoder: DecoderConfig | None = None

    @model_validator(mode="after")
    def _check_budget(self):
        budget = self.max_question_len + self.patches**2
        if budget > self.encoder.max_seq_len:
            raise ValueError(
                f"max_question_len {self.max_question_len} + {self.patches}^2 visual tokens "
                f"exceeds max_seq_len {self.encoder.max_seq_len}"
            )
        if self.mode == "sentence" and self.decoder is None:
            raise ValueError("sentence mode needs a decoder config")
        if self.mode == "classification" and not self.encoder.num_classes:
            raise ValueError("classification mode needs encoder.num_classes")
        if self.decoder is not None and self.decoder.d_model != self.encoder.d_model:
            raise ValueError("decoder d_model must match encoder d_model")
        return self


@dataclass
class Batch:
    """Model inputs for B samples; images are [B,3,H,W] or clips [B,3,3,H,W]."""

    images: np.ndarray
    question_ids: np.ndarray
    question_mask: np.ndarray
    labels: np.ndarray | None = None
    target_ids: np.ndarray | None = None

    def __len__(self) -> int:
        return self.question_ids.shape[0]


class VQAModel(Module):
    def __init__(self, config: ModelConfig, rng: Rng):
        super().__init__()
        self.config = config
        extractor_cls = FeatureExtractor3D if config.temporal else FeatureExtractor2D
        self.extractor = extractor_cls(rng.child("extractor"), config.encoder.visual_dim, config.cnn_widths)
        self.encoder = VisualTextEncoder(config.encoder, rng.child("encoder"))
        self.decoder = AnswerDecoder(config.decoder, rng.child("decoder")) if config.mode == "sentence" else None

    def visual_tokens(self, images: np.ndarray) -> VisualTokens:
        pooled = adaptive_avg_pool(self.extractor(images), self.config.patches)
        return to_visual_tokens(pooled, self.config.encoder.visual_positions)

    def encode(self, batch: Batch) -> EncoderOutput:
        return self.encoder.encode(batch.question_ids, batch.question_mask, self.visual_tokens(batch.images))

    def memory(self, out: EncoderOutput) -> Tensor:
        """Decoder cross-attention source: final states or the last layer's X_SA."""
        if self.config.decoder.memory == "self_attention" and out.self_attention_outputs:
            return out.self_attention_outputs[-1]
        return out.states

    def forward(self, batch: Batch) -> Tensor:
        out = self.encode(batch)
        if self.config.mode == "classification":
            return self.encoder.classify(out.pooled)
        if batch.target_ids is None:
            raise ContractError("sentence mode forward needs target_ids")
        return decode_train(self.decoder, self.memory(out), out.mask, batch.target_ids)

    def loss(self, batch: Batch) -> tuple[Tensor, Tensor]:
        """(loss, logits) for one batch."""
        logits = self(batch)
        if self.config.mode == "classification":
            return nm.cross_entropy(logits, batch.labels), logits
        return sequence_loss(logits, batch.target_ids), logits

    def predict_proba(self, batch: Batch) -> np.ndarray:
        with nm.no_grad():
            logits = self.encoder.classify(self.encode(batch).pooled)
            return nm.softmax(logits, axis=-1).data

    def generate(self, batch: Batch, gen: GenerationConfig) -> list[list[int]]:
        """Beam-search answer ids for every sample in ``batch``."""
        if self.decoder is None:
            raise ContractError("generate needs a sentence-mode model")
        with nm.no_grad():
            out = self.encode(batch)
            memory = self.memory(out)
            return [
                beam_search(self.decoder, memory[i : i + 1], out.mask[i : i + 1], gen) for i in range(len(batch))
            ]


def build_model(config: ModelConfig, seed: int) -> VQAModel:
    return VQAModel(config, Rng(seed).child("model"))


def query_batch(frames: Image | list[Image], question: str, vocab: Vocab, config: ModelConfig) -> Batch:
    """Single-query batch from one frame (or a 3-frame clip) and a question."""
    if config.temporal:
        images = stack_clips([frames if isinstance(frames, list) else [frames] * 3])
    else:
        images = stack_images([frames[-1] if isinstance(frames, list) else frames])
    enc = encode(question, vocab, config.max_question_len)
    return Batch(images, np.asarray([enc.ids]), np.asarray([enc.attention_mask]))


def answer_sentence(
    frames: Image | list[Image], question: str, model: VQAModel, vocab: Vocab, gen: GenerationConfig
) -> str:
    """Encode, beam-search and detokenize one sentence answer."""
    model.eval()
    batch = query_batch(frames, question, vocab, model.config)
    return decode(model.generate(batch, gen)[0], vocab)


def answer_label(
    frames: Image | list[Image], question: str, model: VQAModel, vocab: Vocab, labels: list[str], top_k: int = 3
) -> list[tuple[str, float]]:
    """Top-k (label, probability) pairs, most probable first."""
    model.eval()
    probs = model.predict_proba(query_batch(frames, question, vocab, model.config))[0]
    order = np.argsort(-probs, kind="stable")[:top_k]
    return [(labels[i], float(probs[i])) for i in order]
