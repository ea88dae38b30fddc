"""
Run configuration.

A ``RunConfig`` is resolved in layers, later layers winning:

1. field defaults (the full-size model),
2. the training recipe for (style, mode) from ``config/recipes.yaml``,
3. an optional named profile from ``config/profiles.yaml``,
4. an optional flat YAML config file (``key: value`` per line),
5. ``--set key=value`` overrides and dedicated CLI flags.
"""

import os
from pathlib import Path
from typing import Any, Literal

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError, model_validator

from .decoder import DecoderConfig, GenerationConfig
from .encoder import EncoderConfig
from .errors import ConfigError, ConfigMismatchError, MissingArtifactError
from .model import ModelConfig

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"
OUTPUT_ROOT_ENV = "SVQA_OUTPUT_ROOT"
PATCH_GRIDS = (1, 2, 3, 4, 5)

# Keys that change the network's structure; a checkpoint only loads into a
# run that agrees on all of them.
STRUCTURAL_KEYS = (
    "style",
    "mode",
    "variant",
    "patches",
    "temporal",
    "d_model",
    "num_layers",
    "num_heads",
    "ffn_hidden",
    "cross_channel_hidden",
    "max_seq_len",
    "decoder_layers",
    "feature_channels",
    "cnn_widths",
    "max_question_len",
    "max_answer_len",
    "visual_positions",
    "decoder_memory",
)


class RunConfig(BaseModel):
    """Every knob of a train / eval / ablate run."""

    # data
    dataset: str = "data/endovis"
    style: Literal["endovis", "cholec"] = "endovis"
    mode: Literal["classification", "sentence"] = "classification"
    test_sequences: int = 3
    kfold: int | None = None
    fold: int | None = None
    eval_split: Literal["train", "test"] = "test"
    max_samples: int | None = None
    vocab: str | None = None

    # model
    variant: Literal["baseline", "resmlp"] = "resmlp"
    patches: int = 2
    temporal: bool = False
    d_model: int = 300
    num_layers: int = 6
    num_heads: int = 6
    ffn_hidden: int = 2048
    cross_channel_hidden: int = 2048
    max_seq_len: int = 64
    decoder_layers: int = 6
    feature_channels: int = 256
    cnn_widths: tuple[int, int, int] = (32, 64, 128)
    max_question_len: int = 24
    max_answer_len: int = 20
    dropout: float = 0.1
    visual_positions: Literal["constant", "raster"] = "constant"
    decoder_memory: Literal["final", "self_attention"] = "final"

    # tokenizer
    vocab_size: int = 1000
    min_freq: int = 2
    lowercase: bool = True

    # optimisation
    batch_size: int = 64
    epochs: int = 80
    lr: float = 1e-5
    seed: int = 0
    max_steps: int | None = None
    eval_every: int = 1

    # generation and scoring
    beam_width: int = 3
    length_penalty: float = 0.0
    bleu_smoothing: bool = False
    average: Literal["macro", "weighted"] = "macro"

    # execution
    output_dir: str | None = None
    deterministic: bool = False
    prefetch: bool = True

    @model_validator(mode="after")
    def _check(self):
        if self.patches not in PATCH_GRIDS:
            raise ValueError(f"patches must be one of {PATCH_GRIDS} (n, for n^2 visual tokens), got {self.patches}")
        if self.batch_size < 1 or self.epochs < 1 or self.lr <= 0:
            raise ValueError("batch_size and epochs must be >= 1 and lr > 0")
        if self.beam_width < 1:
            raise ValueError(f"beam_width must be >= 1, got {self.beam_width}")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by num_heads {self.num_heads}")
        if self.max_question_len + self.patches**2 > self.max_seq_len:
            raise ValueError(
                f"sequence budget exceeded: max_question_len {self.max_question_len} + {self.patches}^2 "
                f"visual tokens > max_seq_len {self.max_seq_len}"
            )
        if self.kfold is not None and self.fold is not None and not 0 <= self.fold < self.kfold:
            raise ValueError(f"fold must lie in [0, {self.kfold - 1}], got {self.fold}")
        return self

    def to_model_config(self, vocab_size: int, num_classes: int | None) -> ModelConfig:
        encoder = EncoderConfig(
            vocab_size=vocab_size,
            num_layers=self.num_layers,
            d_model=self.d_model,
            num_heads=self.num_heads,
            ffn_hidden=self.ffn_hidden,
            cross_channel_hidden=self.cross_channel_hidden,
            max_seq_len=self.max_seq_len,
            variant=self.variant,
            dropout=self.dropout,
            visual_dim=self.feature_channels,
            visual_positions=self.visual_positions,
            num_classes=num_classes if self.mode == "classification" else None,
        )
        decoder = None
        if self.mode == "sentence":
            decoder = DecoderConfig(
                vocab_size=vocab_size,
                num_layers=self.decoder_layers,
                d_model=self.d_model,
                num_heads=self.num_heads,
                ffn_hidden=self.ffn_hidden,
                max_answer_len=self.max_answer_len,
                dropout=self.dropout,
                memory=self.decoder_memory,
            )
        return ModelConfig(
            mode=self.mode,
            temporal=self.temporal,
            patches=self.patches,
            cnn_widths=self.cnn_widths,
            max_question_len=self.max_question_len,
            encoder=encoder,
            decoder=decoder,
        )

    def generation(self) -> GenerationConfig:
        return GenerationConfig(
            beam_width=self.beam_width, max_answer_len=self.max_answer_len, length_penalty=self.length_penalty
        )

    def vocab_path(self) -> Path:
        return Path(self.vocab) if self.vocab else Path(self.dataset) / "vocab.txt"


def valid_keys() -> list[str]:
    return list(RunConfig.model_fields)


def _read_yaml(path: Path, artifact: str) -> dict[str, Any]:
    if not path.exists():
        raise MissingArtifactError(artifact, str(path))
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f)
    return data or {}


def _check_keys(values: dict[str, Any], source: str) -> None:
    unknown = sorted(set(values) - set(RunConfig.model_fields))
    if unknown:
        raise ConfigError(f"{source}: unknown keys {unknown}; valid keys: {', '.join(valid_keys())}")


def load_recipe(style: str, mode: str, config_dir: Path = CONFIG_DIR) -> dict[str, Any]:
    recipes = _read_yaml(config_dir / "recipes.yaml", "recipes").get("recipes", {})
    try:
        recipe = dict(recipes[style][mode])
    except KeyError:
        raise ConfigError(f"no training recipe for style={style!r} mode={mode!r}") from None
    _check_keys(recipe, "recipes.yaml")
    return recipe


def load_profile(name: str, config_dir: Path = CONFIG_DIR) -> dict[str, Any]:
    profiles = _read_yaml(config_dir / "profiles.yaml", "profiles").get("profiles", {})
    if name not in profiles:
        raise ConfigError(f"unknown profile {name!r}; available: {sorted(profiles)}")
    profile = dict(profiles[name] or {})
    _check_keys(profile, f"profile {name!r}")
    return profile


def load_config_file(path: str | Path) -> dict[str, Any]:
    values = _read_yaml(Path(path), "config file")
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: expected flat 'key: value' lines")
    _check_keys(values, str(path))
    return values


def parse_overrides(pairs: list[str] | None) -> dict[str, Any]:
    """``["lr=1e-3", "temporal=true"]`` -> typed dict (values parsed as YAML scalars)."""
    values: dict[str, Any] = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        values[key.strip()] = yaml.safe_load(raw)
    _check_keys(values, "--set")
    return values


def resolve_config(
    style: str = "endovis",
    mode: str = "classification",
    profile: str | None = None,
    config_file: str | Path | None = None,
    overrides: dict[str, Any] | None = None,
    config_dir: Path = CONFIG_DIR,
) -> RunConfig:
    """Merge defaults, recipe, profile, config file and overrides into a RunConfig."""
    values: dict[str, Any] = {"style": style, "mode": mode}
    values.update(load_recipe(style, mode, config_dir))
    if profile:
        values.update(load_profile(profile, config_dir))
    if config_file:
        values.update(load_config_file(config_file))
    values.update(overrides or {})
    _check_keys(values, "config")
    return _validated(values)


def check_compatible(saved: dict[str, Any], requested: RunConfig, keys: tuple[str, ...] = STRUCTURAL_KEYS) -> None:
    """Raise ConfigMismatchError listing every structural key on which the two disagree."""
    wanted = requested.model_dump()
    differing = {}
    for key in keys:
        a, b = saved.get(key), wanted.get(key)
        if isinstance(a, list):
            a = tuple(a)
        if isinstance(b, list):
            b = tuple(b)
        if a != b:
            differing[key] = (a, b)
    if differing:
        raise ConfigMismatchError(differing)


def default_output_root() -> Path:
    """``$SVQA_OUTPUT_ROOT`` (``.env`` is honoured), else ``results``."""
    load_dotenv()
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "results"))


def _validated(values: dict[str, Any]) -> RunConfig:
    try:
        return RunConfig(**values)
    except ValidationError as exc:
        err = exc.errors()[0]
        field = ".".join(str(p) for p in err["loc"]) or "config"
        raise ConfigError(f"{field}: {err['msg']}") from None


def with_overrides(run: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Copy of ``run`` with ``overrides`` applied and re-validated."""
    _check_keys(overrides, "overrides")
    return _validated({**run.model_dump(), **overrides})
