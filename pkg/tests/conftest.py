"""Shared fixtures: seeded generators, tiny configs and small generated datasets."""

import pytest

from src.config import RunConfig, resolve_config
from src.data import write_dataset
from src.decoder import DecoderConfig
from src.encoder import EncoderConfig
from src.rng import Rng
from src.tokenizer import Vocab, train_vocab
from src.trainer import train_dataset_vocab


@pytest.fixture
def rng() -> Rng:
    return Rng(1234)


@pytest.fixture
def tiny_encoder_config() -> EncoderConfig:
    """d=8, N=6: the size used for finite-difference checks."""
    return EncoderConfig(
        vocab_size=20,
        num_layers=1,
        d_model=8,
        num_heads=2,
        ffn_hidden=12,
        cross_channel_hidden=10,
        max_seq_len=6,
        dropout=0.0,
        visual_dim=5,
        num_classes=4,
    )


@pytest.fixture
def tiny_decoder_config() -> DecoderConfig:
    return DecoderConfig(vocab_size=20, num_layers=1, d_model=8, num_heads=2, ffn_hidden=12, max_answer_len=6, dropout=0.0)


@pytest.fixture
def small_vocab() -> Vocab:
    corpus = [
        "what organ is being operated?",
        "the organ being operated is kidney",
        "where is grasper located?",
        "the grasper is located at top left",
    ] * 2
    return train_vocab(corpus, target_size=200, min_freq=2)


def _dataset(root, style: str, sequences: int, frames: int, seed: int = 7):
    write_dataset(root, style, sequences, frames, seed, image_size=32)
    train_dataset_vocab(root, vocab_size=400, min_freq=1).save(root / "vocab.txt")
    return root


@pytest.fixture(scope="session")
def endovis_dataset(tmp_path_factory):
    return _dataset(tmp_path_factory.mktemp("endovis"), "endovis", sequences=4, frames=4)


@pytest.fixture(scope="session")
def endovis_sweep_dataset(tmp_path_factory):
    """Enough frames for a 100-sample training side with one held-out sequence."""
    return _dataset(tmp_path_factory.mktemp("endovis_sweep"), "endovis", sequences=5, frames=8, seed=3)


@pytest.fixture(scope="session")
def cholec_dataset(tmp_path_factory):
    return _dataset(tmp_path_factory.mktemp("cholec"), "cholec", sequences=4, frames=4)


def _run_config(dataset, style: str = "endovis", mode: str = "classification", **overrides) -> RunConfig:
    values = {"dataset": str(dataset), "test_sequences": 1, "deterministic": True, "prefetch": False}
    values.update(overrides)
    return resolve_config(style=style, mode=mode, profile="test", overrides=values)


@pytest.fixture
def make_run():
    return _run_config

