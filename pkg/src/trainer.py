"""
Training and evaluation loops.

Loads a generated dataset (manifest, QA pairs, frames, vocab), trains a
``VQAModel`` with Adam on cross-entropy, logs one CSV row per epoch, keeps
the best checkpoint by validation accuracy (classification) or BLEU-4
(sentence), and evaluates checkpoints on either side of the split.
"""

import csv
import queue
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator

import numpy as np
from pydantic import BaseModel
from rich.console import Console
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, default_output_root
from .data import (
    Manifest,
    SplitSpec,
    clip_for_frame,
    kfold_splits,
    label_universe,
    load_manifest,
    load_qa,
    ratio_split,
)
from .errors import ConfigMismatchError, EmptyInputError, MissingArtifactError
from .metrics import ClassificationReport, CorpusScores, classification_report, corpus_scores
from .model import Batch, VQAModel, build_model
from .optim import Adam
from .rng import Rng
from .tokenizer import Vocab, build_corpus, decode, encode, encode_target, normalize, train_vocab
from .vision import load_image

console = Console()

PREFETCH_DEPTH = 2
PREFETCH_JOIN_TIMEOUT = 5.0
CLASSIFICATION_METRICS = ["accuracy", "recall", "f_score"]
SENTENCE_METRICS = ["bleu_1", "bleu_2", "bleu_3", "bleu_4", "cider", "meteor"]
# run fields that describe where/how a run executes rather than what it trains
EXECUTION_ONLY = {"output_dir", "deterministic", "prefetch"}


# --- records ---


class EpochRecord(BaseModel):
    epoch: int
    loss: float
    metrics: dict[str, float] = {}
    wall_seconds: float = 0.0


class TrainResult(BaseModel):
    history: list[EpochRecord]
    steps: int
    best_epoch: int
    best_metric: float
    checkpoint: str
    final_checkpoint: str
    log_path: str


class EvalResult(BaseModel):
    mode: str
    split: str
    classification: ClassificationReport | None = None
    scores: CorpusScores | None = None
    predictions: list[dict[str, Any]] = []

    def metrics(self) -> dict[str, float]:
        if self.classification is not None:
            return {k: getattr(self.classification, k) for k in CLASSIFICATION_METRICS}
        return {k: getattr(self.scores, k) for k in SENTENCE_METRICS}

    @property
    def primary(self) -> float:
        return self.classification.accuracy if self.classification is not None else self.scores.bleu_4


def metric_names(mode: str) -> list[str]:
    return CLASSIFICATION_METRICS if mode == "classification" else SENTENCE_METRICS


# --- dataset ---


@dataclass
class Sample:
    sequence_id: int
    frame_id: int
    frames: list[str]
    question: str
    answer: str


class VQADataset:
    """QA samples of one split side, with lazily loaded and cached frames."""

    def __init__(self, root: Path, samples: list[Sample], vocab: Vocab, run: RunConfig, labels: list[str] | None):
        self.root = root
        self.samples = samples
        self.vocab = vocab
        self.run = run
        self.labels = labels
        self._frames: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.samples)

    def _frame(self, rel: str) -> np.ndarray:
        if rel not in self._frames:
            path = self.root / rel
            if not path.exists():
                raise MissingArtifactError("frame", str(path))
            self._frames[rel] = load_image(path).chw()
        return self._frames[rel]

    def images(self, sample: Sample) -> np.ndarray:
        if self.run.temporal:
            return np.stack([self._frame(rel) for rel in sample.frames], axis=1)
        return self._frame(sample.frames[-1])

    def batch(self, indices: np.ndarray | list[int]) -> Batch:
        picked = [self.samples[int(i)] for i in indices]
        questions = [encode(s.question, self.vocab, self.run.max_question_len, self.run.lowercase) for s in picked]
        batch = Batch(
            images=np.stack([self.images(s) for s in picked]),
            question_ids=np.asarray([q.ids for q in questions]),
            question_mask=np.asarray([q.attention_mask for q in questions]),
        )
        if self.labels is not None:
            universe = label_universe(self.run.style)
            batch.labels = np.asarray([universe.index(s.answer) for s in picked])
        else:
            batch.target_ids = np.asarray(
                [encode_target(s.answer, self.vocab, self.run.max_answer_len, self.run.lowercase).ids for s in picked]
            )
        return batch


def resolve_split(run: RunConfig, manifest: Manifest) -> SplitSpec:
    if run.kfold:
        return kfold_splits(manifest, run.kfold)[run.fold or 0]
    return ratio_split(manifest, run.test_sequences)


def load_samples(run: RunConfig, manifest: Manifest, side: str) -> list[Sample]:
    split = resolve_split(run, manifest)
    wanted = set(split.train_sequences if side == "train" else split.test_sequences)
    samples = []
    for qa in load_qa(Path(run.dataset) / f"qa_{run.mode}.jsonl"):
        if qa.sequence_id not in wanted:
            continue
        if run.temporal:
            frames = clip_for_frame(manifest, qa.sequence_id, qa.frame_id)
        else:
            frames = [manifest.sequence(qa.sequence_id).frames[qa.frame_id]]
        samples.append(Sample(qa.sequence_id, qa.frame_id, frames, qa.question, qa.answer))
    return samples[: run.max_samples] if run.max_samples else samples


def load_vocab(run: RunConfig) -> Vocab:
    path = run.vocab_path()
    if not path.exists():
        raise MissingArtifactError("vocab", str(path))
    return Vocab.load(path)


def open_dataset(run: RunConfig, side: str, vocab: Vocab | None = None) -> VQADataset:
    root = Path(run.dataset)
    manifest = load_manifest(root)
    if manifest.style != run.style:
        raise ConfigMismatchError({"style": (manifest.style, run.style)})
    vocab = vocab or load_vocab(run)
    labels = label_universe(run.style).labels if run.mode == "classification" else None
    return VQADataset(root, load_samples(run, manifest, side), vocab, run, labels)


def train_dataset_vocab(dataset: str | Path, vocab_size: int, min_freq: int, lowercase: bool = True) -> Vocab:
    """Train the vocab on both QA files (questions, sentences, labels) of a dataset."""
    root = Path(dataset)
    records = []
    for mode in ("classification", "sentence"):
        records += [qa.model_dump() for qa in load_qa(root / f"qa_{mode}.jsonl")]
    return train_vocab(build_corpus(records), vocab_size, min_freq, lowercase)


# --- batching ---


def batch_order(n: int, batch_size: int, rng: Rng | None = None) -> list[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def iter_batches(dataset: VQADataset, chunks: list[np.ndarray], prefetch: bool) -> Iterator[Batch]:
    """Assemble batches in order, optionally one bounded queue ahead on a worker thread."""
    if not prefetch:
        for chunk in chunks:
            yield dataset.batch(chunk)
        return

    slots: queue.Queue = queue.Queue(maxsize=PREFETCH_DEPTH)
    stop = threading.Event()
    done = object()

    def offer(item) -> bool:
        while not stop.is_set():
            try:
                slots.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def produce():
        try:
            for chunk in chunks:
                if not offer(dataset.batch(chunk)):
                    return
        except Exception as exc:  # surfaced on the consumer side
            offer(exc)
            return
        offer(done)

    worker = threading.Thread(target=produce, name="batch-prefetch", daemon=True)
    worker.start()
    try:
        while True:
            item = slots.get()
            if item is done:
                return
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()
        worker.join(timeout=PREFETCH_JOIN_TIMEOUT)


# --- evaluation ---


def evaluate_model(model: VQAModel, dataset: VQADataset, run: RunConfig, split: str | None = None) -> EvalResult:
    if len(dataset) == 0:
        raise EmptyInputError("evaluation split has no samples")
    was_training = model.training
    model.eval()
    chunks = batch_order(len(dataset), run.batch_size)
    predictions: list[dict[str, Any]] = []
    split = split or run.eval_split

    if run.mode == "classification":
        preds, refs = [], []
        for chunk in chunks:
            probs = model.predict_proba(dataset.batch(chunk))
            for i, p in zip(chunk, probs):
                sample = dataset.samples[int(i)]
                label = dataset.labels[int(np.argmax(p))]
                preds.append(label)
                refs.append(sample.answer)
                predictions.append(
                    {"sequence_id": sample.sequence_id, "frame_id": sample.frame_id, "question": sample.question,
                     "answer": sample.answer, "prediction": label, "probability": float(np.max(p))}
                )
        report = classification_report(preds, refs, dataset.labels, run.average)
        model.train(was_training)
        return EvalResult(mode=run.mode, split=split, classification=report, predictions=predictions)

    gen = run.generation()
    candidates, references = [], []
    for chunk in chunks:
        for i, ids in zip(chunk, model.generate(dataset.batch(chunk), gen)):
            sample = dataset.samples[int(i)]
            text = decode(ids, dataset.vocab)
            candidates.append(text)
            references.append(" ".join(normalize(sample.answer, run.lowercase)))
            predictions.append(
                {"sequence_id": sample.sequence_id, "frame_id": sample.frame_id, "question": sample.question,
                 "answer": sample.answer, "prediction": text}
            )
    scores = corpus_scores(candidates, references, run.bleu_smoothing)
    model.train(was_training)
    return EvalResult(mode=run.mode, split=split, scores=scores, predictions=predictions)


# --- checkpoints ---


def checkpoint_config(run: RunConfig, vocab: Vocab, labels: list[str] | None, epoch: int, metrics: dict) -> dict:
    return {
        "run": run.model_dump(mode="json", exclude=EXECUTION_ONLY),
        "vocab": vocab.tokens,
        "labels": labels,
        "epoch": epoch,
        "metrics": metrics,
    }


@dataclass
class TrainedModel:
    run: RunConfig
    model: VQAModel
    vocab: Vocab
    labels: list[str] | None
    echo: dict[str, Any]


def load_trained(path: str | Path) -> TrainedModel:
    config, tensors = load_checkpoint(path)
    run = RunConfig(**config["run"])
    vocab = Vocab(config["vocab"])
    labels = config.get("labels")
    model = build_model(run.to_model_config(len(vocab), len(labels) if labels else None), run.seed)
    model.load_state_dict(tensors)
    model.eval()
    return TrainedModel(run=run, model=model, vocab=vocab, labels=labels, echo=config)


# --- training ---


def _write_log_row(path: Path, row: list[Any] | None, header: list[str] | None = None) -> None:
    with open(path, "a" if header is None else "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        if header is not None:
            writer.writerow(header)
        if row is not None:
            writer.writerow(row)


def train_model(run: RunConfig, out_dir: str | Path | None = None) -> TrainResult:
    """
    Train one model as configured by ``run``.

    Args:
        run: Resolved run configuration (dataset must have a trained vocab).
        out_dir: Output directory; defaults to ``run.output_dir`` or
            ``<output root>/train``.

    Returns:
        TrainResult with the per-epoch history and checkpoint paths. Writes
        ``train_log.csv``, ``best.svqa`` and ``final.svqa`` under ``out_dir``.
    """
    out = Path(out_dir or run.output_dir or default_output_root() / "train")
    out.mkdir(parents=True, exist_ok=True)
    train_set = open_dataset(run, "train")
    if len(train_set) == 0:
        raise EmptyInputError(f"no training samples in {run.dataset} for the configured split")
    val_set = train_set if run.eval_split == "train" else open_dataset(run, "test", train_set.vocab)
    vocab, labels = train_set.vocab, train_set.labels

    model = build_model(run.to_model_config(len(vocab), len(labels) if labels else None), run.seed)
    model.train()
    optimizer = Adam(model.named_parameters(), lr=run.lr)
    shuffle_rng = Rng(run.seed).child("shuffle")
    prefetch = run.prefetch and not run.deterministic

    log_path = out / "train_log.csv"
    names = metric_names(run.mode)
    _write_log_row(log_path, None, header=["epoch", "loss", *names, "wall_seconds"])

    console.print(
        f"\n[bold]Training {run.variant} ({run.mode}, n={run.patches}, "
        f"{'temporal' if run.temporal else 'single-frame'}) on {len(train_set)} samples...[/bold]\n"
    )

    history: list[EpochRecord] = []
    best_metric, best_epoch, steps = -np.inf, 0, 0
    best_path, final_path = out / "best.svqa", out / "final.svqa"

    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TextColumn("[progress.percentage]{task.percentage:>3.0f}%"),
        console=console,
    ) as progress:
        pbar = progress.add_task("Training...", total=run.epochs)

        for epoch in range(1, run.epochs + 1):
            started = time.perf_counter()
            loss_sum, seen = 0.0, 0
            chunks = batch_order(len(train_set), run.batch_size, shuffle_rng.child(epoch))
            for batch in iter_batches(train_set, chunks, prefetch):
                optimizer.zero_grad()
                loss, _ = model.loss(batch)
                loss.backward()
                optimizer.step()
                loss_sum += loss.item() * len(batch)
                seen += len(batch)
                steps += 1
                if run.max_steps and steps >= run.max_steps:
                    break

            last = epoch == run.epochs or bool(run.max_steps and steps >= run.max_steps)
            metrics: dict[str, float] = {}
            if epoch % run.eval_every == 0 or last:
                result = evaluate_model(model, val_set, run)
                metrics = result.metrics()
                if result.primary > best_metric:
                    best_metric, best_epoch = result.primary, epoch
                    save_checkpoint(best_path, checkpoint_config(run, vocab, labels, epoch, metrics), model.state_dict())

            wall = 0.0 if run.deterministic else round(time.perf_counter() - started, 3)
            record = EpochRecord(epoch=epoch, loss=loss_sum / max(1, seen), metrics=metrics, wall_seconds=wall)
            history.append(record)
            _write_log_row(
                log_path, [epoch, repr(record.loss), *[repr(metrics[k]) if k in metrics else "" for k in names], wall]
            )
            progress.update(pbar, advance=1, description=f"Epoch {epoch} loss {record.loss:.4f}")
            if last:
                break

    save_checkpoint(final_path, checkpoint_config(run, vocab, labels, history[-1].epoch, history[-1].metrics), model.state_dict())
    console.print(
        f"[green]Done: {steps} steps, best epoch {best_epoch} "
        f"({'accuracy' if run.mode == 'classification' else 'bleu_4'} {best_metric:.4f}). "
        f"Checkpoints in {out}/[/green]"
    )
    return TrainResult(
        history=history,
        steps=steps,
        best_epoch=best_epoch,
        best_metric=float(best_metric),
        checkpoint=str(best_path),
        final_checkpoint=str(final_path),
        log_path=str(log_path),
    )


def train_kfold(run: RunConfig, out_dir: str | Path) -> list[tuple[int, TrainResult, EvalResult]]:
    """One model per fold; each is evaluated on its held-out sequences."""
    rows = []
    for fold in range(run.kfold):
        fold_run = run.model_copy(update={"fold": fold, "eval_split": "test"})
        console.print(f"[bold]Fold {fold + 1}/{run.kfold}[/bold]")
        result = train_model(fold_run, Path(out_dir) / f"fold{fold}")
        trained = load_trained(result.checkpoint)
        evaluation = evaluate_model(trained.model, open_dataset(fold_run, "test", trained.vocab), fold_run, "test")
        rows.append((fold, result, evaluation))
    return rows
