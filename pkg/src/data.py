"""
Annotation schemas, QA-pair construction and the synthetic scene renderer.

Two dataset styles are supported:

- ``endovis``: organ, tools, tool-tissue interactions and tool locations.
  Classification answers come from a 26-label universe
  (1 organ + 8 tools + 13 interaction verbs + 4 locations).
- ``cholec``: surgical phase, tool presence and tool count, two QA pairs per
  frame. Classification answers come from a 14-label universe
  (8 phases + yes/no + counts 0-3).

On disk a dataset directory holds ``manifest.json``, ``annotations.jsonl``,
``qa_classification.jsonl``, ``qa_sentence.jsonl`` and the rendered frames.
"""

import json
from pathlib import Path
from typing import Iterable, Literal

import numpy as np
from pydantic import BaseModel, ValidationError
from rich.console import Console
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn

from .errors import AnnotationError, ConfigError, MissingArtifactError
from .rng import Rng
from .vision import Image, save_image

console = Console()

# --- label vocabularies ---

ENDOVIS_ORGAN = "kidney"
ENDOVIS_TOOLS = [
    "bipolar forceps",
    "grasper",
    "large needle driver",
    "monopolar curved scissors",
    "ultrasound probe",
    "suction instrument",
    "clip applier",
    "stapler",
]
ENDOVIS_VERBS = [
    "idle",
    "grasping",
    "retracting",
    "cutting",
    "cauterizing",
    "suctioning",
    "looping",
    "suturing",
    "clipping",
    "stapling",
    "ultrasound sensing",
    "tissue manipulation",
    "tool manipulation",
]
# verbs phrased as activities ("performing <verb> on the <target>")
_NOUN_VERBS = {"ultrasound sensing", "tissue manipulation", "tool manipulation"}
ENDOVIS_TARGETS = ["kidney", "tissue", "blood vessel"]
LOCATIONS = ["top left", "top right", "bottom left", "bottom right"]

CHOLEC_PHASES = [
    "preparation",
    "calot triangle dissection",
    "clipping cutting",
    "gallbladder dissection",
    "gallbladder packaging",
    "cleaning coagulation",
    "gallbladder retraction",
    "idle",
]
CHOLEC_TOOLS = ["grasper", "bipolar", "hook", "scissors", "clipper", "irrigator", "specimen bag"]
TOOL_STATES = ["yes", "no"]
TOOL_COUNTS = ["0", "1", "2", "3"]
CHOLEC_FRAME_SPACING_S = 4.0  # 0.25 fps

QA_PER_CHOLEC_FRAME = 2

Style = Literal["endovis", "cholec"]
AnswerMode = Literal["classification", "sentence"]


def normalize_label(text: str) -> str:
    return " ".join(text.replace("-", " ").replace("_", " ").lower().split())


# --- schemas ---


class LabelUniverse(BaseModel):
    dataset: Style
    labels: list[str]

    def index(self, label: str) -> int:
        try:
            return self.labels.index(normalize_label(label))
        except ValueError:
            raise AnnotationError("answer", f"{label!r} is not in the {self.dataset} label universe") from None

    def __len__(self) -> int:
        return len(self.labels)


def label_universe(style: Style) -> LabelUniverse:
    if style == "endovis":
        return LabelUniverse(dataset=style, labels=[ENDOVIS_ORGAN] + ENDOVIS_TOOLS + ENDOVIS_VERBS + LOCATIONS)
    return LabelUniverse(dataset=style, labels=CHOLEC_PHASES + TOOL_STATES + TOOL_COUNTS)


class Interaction(BaseModel):
    tool: str
    verb: str
    target: str


class FrameAnnotation(BaseModel):
    """One annotated frame; field names are the JSON-lines keys."""

    style: Style
    sequence_id: int
    frame_id: int
    organ: str | None = None
    tools: list[str] = []
    interactions: list[Interaction] = []
    tool_locations: dict[str, str] = {}
    phase: str | None = None
    tool_count: int | None = None
    timestamp_s: float | None = None


class QAPair(BaseModel):
    sequence_id: int
    frame_id: int
    question: str
    answer: str
    answer_type: AnswerMode


class SequenceEntry(BaseModel):
    sequence_id: int
    frames: list[str]


class Manifest(BaseModel):
    style: Style
    seed: int
    image_size: int
    sequences: list[SequenceEntry]

    def frame_count(self, sequence_ids: Iterable[int] | None = None) -> int:
        wanted = None if sequence_ids is None else set(sequence_ids)
        return sum(len(s.frames) for s in self.sequences if wanted is None or s.sequence_id in wanted)

    def sequence(self, sequence_id: int) -> SequenceEntry:
        for s in self.sequences:
            if s.sequence_id == sequence_id:
                return s
        raise ConfigError(f"sequence {sequence_id} is not in the manifest")


class SplitSpec(BaseModel):
    train_sequences: list[int]
    test_sequences: list[int]
    train_frames: int = 0
    test_frames: int = 0


# --- validation ---


def validate_annotation(ann: FrameAnnotation) -> FrameAnnotation:
    """Check the style-specific fields; raises AnnotationError naming the field."""
    if ann.frame_id < 0 or ann.sequence_id < 0:
        raise AnnotationError("frame_id", "sequence_id and frame_id must be non-negative")
    if ann.style == "endovis":
        if ann.organ is None or normalize_label(ann.organ) != ENDOVIS_ORGAN:
            raise AnnotationError("organ", f"expected {ENDOVIS_ORGAN!r}, got {ann.organ!r}")
        if len(set(ann.tools)) != len(ann.tools):
            raise AnnotationError("tools", f"duplicate tools in {ann.tools}")
        for tool in ann.tools:
            if tool not in ENDOVIS_TOOLS:
                raise AnnotationError("tools", f"unknown tool {tool!r}")
        for inter in ann.interactions:
            if inter.tool not in ann.tools:
                raise AnnotationError("interactions", f"tool {inter.tool!r} is not listed in tools")
            if inter.verb not in ENDOVIS_VERBS:
                raise AnnotationError("interactions", f"unknown verb {inter.verb!r}")
            if not inter.target.strip():
                raise AnnotationError("interactions", "empty interaction target")
        for tool, loc in ann.tool_locations.items():
            if tool not in ann.tools:
                raise AnnotationError("tool_locations", f"tool {tool!r} is not listed in tools")
            if loc not in LOCATIONS:
                raise AnnotationError("tool_locations", f"unknown location {loc!r}")
    else:
        if ann.phase is None or normalize_label(ann.phase) not in CHOLEC_PHASES:
            raise AnnotationError("phase", f"unknown phase {ann.phase!r}")
        for tool in ann.tools:
            if tool not in CHOLEC_TOOLS:
                raise AnnotationError("tools", f"unknown tool {tool!r}")
        if ann.tool_count is None or ann.tool_count < 0:
            raise AnnotationError("tool_count", f"must be a non-negative integer, got {ann.tool_count!r}")
    return ann


# --- QA generation ---


def _interaction_sentence(inter: Interaction) -> str:
    if inter.verb == "idle":
        return f"the {inter.tool} is idle"
    if inter.verb in _NOUN_VERBS:
        return f"the {inter.tool} is performing {inter.verb} on the {inter.target}"
    return f"the {inter.tool} is {inter.verb} the {inter.target}"


def generate_endovis_qa(ann: FrameAnnotation, mode: AnswerMode) -> list[QAPair]:
    """
    Organ, per-tool state, per-tool location and per-location tool questions.

    A "what tool is located at" question is only asked for quadrants holding
    exactly one tool.
    """
    if ann.style != "endovis":
        raise AnnotationError("style", f"expected an endovis annotation, got {ann.style!r}")
    validate_annotation(ann)
    items: list[tuple[str, str, str]] = [
        ("what organ is being operated?", ENDOVIS_ORGAN, f"the organ being operated is {ENDOVIS_ORGAN}")
    ]
    for inter in ann.interactions:
        items.append((f"what is the state of {inter.tool}?", inter.verb, _interaction_sentence(inter)))
    for tool, loc in ann.tool_locations.items():
        items.append((f"where is {tool} located?", loc, f"the {tool} is located at {loc}"))
    for loc in LOCATIONS:
        here = [t for t, where in ann.tool_locations.items() if where == loc]
        if len(here) == 1:
            items.append((f"what tool is located at {loc}?", here[0], f"the tool at {loc} is {here[0]}"))
    return [
        QAPair(
            sequence_id=ann.sequence_id,
            frame_id=ann.frame_id,
            question=q,
            answer=label if mode == "classification" else sentence,
            answer_type=mode,
        )
        for q, label, sentence in items
    ]


def generate_cholec_qa(ann: FrameAnnotation, mode: AnswerMode) -> list[QAPair]:
    """
    Exactly two pairs: the phase question, then a second question by frame parity.

    Even frames ask the tool count; odd frames ask whether one tool is in use,
    cycling through the tools every two frames. The tool_count of an odd frame is
    therefore never asked about.
    """
    if ann.style != "cholec":
        raise AnnotationError("style", f"expected a cholec annotation, got {ann.style!r}")
    validate_annotation(ann)
    phase = normalize_label(ann.phase)
    items = [("what is the surgical phase of the image?", phase, f"the surgical phase is {phase}")]
    if ann.frame_id % 2 == 0:
        count = TOOL_COUNTS[min(ann.tool_count, len(TOOL_COUNTS) - 1)]
        noun = "tool is" if count == "1" else "tools are"
        items.append(("how many tools are used?", count, f"{count} {noun} used in the image"))
    else:
        tool = CHOLEC_TOOLS[(ann.frame_id // 2) % len(CHOLEC_TOOLS)]
        if tool in ann.tools:
            items.append((f"is {tool} being used?", "yes", f"yes the {tool} is being used"))
        else:
            items.append((f"is {tool} being used?", "no", f"no the {tool} is not being used"))
    return [
        QAPair(
            sequence_id=ann.sequence_id,
            frame_id=ann.frame_id,
            question=q,
            answer=label if mode == "classification" else sentence,
            answer_type=mode,
        )
        for q, label, sentence in items
    ]


def generate_qa(ann: FrameAnnotation, mode: AnswerMode) -> list[QAPair]:
    return generate_endovis_qa(ann, mode) if ann.style == "endovis" else generate_cholec_qa(ann, mode)


# --- synthetic annotations ---


def random_annotation(style: Style, sequence_id: int, frame_id: int, frames_per_sequence: int, rng: Rng) -> FrameAnnotation:
    if style == "endovis":
        k = int(rng.integers(1, 4))
        tools = rng.choice(ENDOVIS_TOOLS, size=k, replace=False)
        locs = rng.choice(LOCATIONS, size=k, replace=False)
        interactions = [
            Interaction(tool=t, verb=rng.choice(ENDOVIS_VERBS), target=rng.choice(ENDOVIS_TARGETS)) for t in tools
        ]
        return FrameAnnotation(
            style=style,
            sequence_id=sequence_id,
            frame_id=frame_id,
            organ=ENDOVIS_ORGAN,
            tools=tools,
            interactions=interactions,
            tool_locations=dict(zip(tools, locs)),
        )
    phase = CHOLEC_PHASES[min(len(CHOLEC_PHASES) - 1, frame_id * len(CHOLEC_PHASES) // max(1, frames_per_sequence))]
    k = int(rng.integers(0, 4))
    tools = rng.choice(CHOLEC_TOOLS, size=k, replace=False) if k else []
    return FrameAnnotation(
        style=style,
        sequence_id=sequence_id,
        frame_id=frame_id,
        phase=phase,
        tools=tools,
        tool_count=k,
        timestamp_s=frame_id * CHOLEC_FRAME_SPACING_S,
    )


def exhaustive_annotations(style: Style) -> list[FrameAnnotation]:
    """Small corpus touching every label of the style's universe."""
    anns: list[FrameAnnotation] = []
    if style == "endovis":
        for i, verb in enumerate(ENDOVIS_VERBS):
            tool = ENDOVIS_TOOLS[i % len(ENDOVIS_TOOLS)]
            loc = LOCATIONS[i % len(LOCATIONS)]
            anns.append(
                FrameAnnotation(
                    style=style,
                    sequence_id=0,
                    frame_id=i,
                    organ=ENDOVIS_ORGAN,
                    tools=[tool],
                    interactions=[Interaction(tool=tool, verb=verb, target=ENDOVIS_TARGETS[i % len(ENDOVIS_TARGETS)])],
                    tool_locations={tool: loc},
                )
            )
        return anns
    for frame in range(4 * len(CHOLEC_PHASES)):
        half = frame // 2
        if frame % 2 == 0:
            # count question: counts cycle through 0..3
            tools = list(CHOLEC_TOOLS[: half % len(TOOL_COUNTS)])
        else:
            # state question about CHOLEC_TOOLS[half % 7]: alternately present and absent
            tools = [CHOLEC_TOOLS[half % len(CHOLEC_TOOLS)]] if half % 2 == 0 else []
        anns.append(
            FrameAnnotation(
                style=style,
                sequence_id=0,
                frame_id=frame,
                phase=CHOLEC_PHASES[frame // 4],
                tools=tools,
                tool_count=len(tools),
            )
        )
    return anns


# --- synthetic scenes ---

_TOOL_COLOURS = np.array(
    [
        [0.95, 0.85, 0.10],
        [0.10, 0.80, 0.95],
        [0.95, 0.20, 0.85],
        [0.20, 0.95, 0.30],
        [0.95, 0.55, 0.10],
        [0.40, 0.30, 0.95],
        [0.95, 0.95, 0.95],
        [0.10, 0.45, 0.25],
    ]
)
_QUADRANT_ORIGINS = {"top left": (0, 0), "top right": (0, 1), "bottom left": (1, 0), "bottom right": (1, 1)}


def _verb_texture(verb_index: int, size: int) -> np.ndarray:
    """Stripe pattern in [0, 1]: 4 orientations × 3 periods, plus solid."""
    if verb_index >= 12:
        return np.ones((size, size))
    orientation, period = verb_index % 4, 2 + verb_index // 4
    r, c = np.mgrid[0:size, 0:size]
    phase = (r, c, r + c, r - c)[orientation]
    return ((phase // period) % 2).astype(np.float64)


def _background(ann: FrameAnnotation) -> np.ndarray:
    if ann.style == "endovis":
        return np.array([0.55, 0.18, 0.16])
    hue = CHOLEC_PHASES.index(normalize_label(ann.phase)) / len(CHOLEC_PHASES)
    return np.array([0.35 + 0.4 * hue, 0.25 + 0.3 * (1.0 - hue), 0.2 + 0.15 * np.sin(6.0 * hue) ** 2])


def glyph_box(location: str, size: int, rng: Rng) -> tuple[int, int, int]:
    """(row, col, glyph_size) of a glyph kept fully inside its quadrant."""
    half, glyph = size // 2, size // 4
    jitter = max(1, size // 16)
    qr, qc = _QUADRANT_ORIGINS[location]
    offset = (half - glyph) // 2
    dr, dc = (int(v) for v in rng.integers(-jitter, jitter + 1, size=2))
    row = qr * half + min(max(offset + dr, 0), half - glyph)
    col = qc * half + min(max(offset + dc, 0), half - glyph)
    return row, col, glyph


def synth_scene(ann: FrameAnnotation, seed: int, size: int = 64) -> Image:
    """
    Render a deterministic frame for ``ann``.

    Background tone encodes organ/phase, each tool is a coloured square in its
    location quadrant, and the square's stripe texture encodes the tool's
    interaction verb.
    """
    rng = Rng(seed).child(f"scene/{ann.style}/{ann.sequence_id}/{ann.frame_id}")
    pixels = np.broadcast_to(_background(ann), (size, size, 3)).copy()

    if ann.style == "endovis":
        verbs = {inter.tool: inter.verb for inter in ann.interactions}
        placed = [(tool, loc, verbs.get(tool, "idle")) for tool, loc in ann.tool_locations.items()]
        palette = ENDOVIS_TOOLS
    else:
        placed = [(tool, LOCATIONS[i % len(LOCATIONS)], "idle") for i, tool in enumerate(ann.tools)]
        palette = CHOLEC_TOOLS

    for tool, loc, verb in placed:
        row, col, glyph = glyph_box(loc, size, rng.child(tool))
        texture = _verb_texture(ENDOVIS_VERBS.index(verb), glyph)
        colour = _TOOL_COLOURS[palette.index(tool) % len(_TOOL_COLOURS)]
        pixels[row : row + glyph, col : col + glyph] = colour * (0.45 + 0.55 * texture)[..., None]

    pixels += rng.child("noise").normal(0.0, 0.02, pixels.shape)
    return Image(pixels)


# --- files ---


def write_jsonl(path: Path, records: Iterable[BaseModel]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.model_dump(), sort_keys=True, ensure_ascii=False) + "\n")


def _read_jsonl(path: Path, artifact: str) -> list[dict]:
    if not path.exists():
        raise MissingArtifactError(artifact, str(path))
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def load_annotations(path: str | Path) -> list[FrameAnnotation]:
    anns = []
    for i, row in enumerate(_read_jsonl(Path(path), "annotations")):
        try:
            anns.append(validate_annotation(FrameAnnotation(**row)))
        except ValidationError as exc:
            err = exc.errors()[0]
            field = ".".join(str(p) for p in err["loc"]) or "record"
            raise AnnotationError(field, f"line {i + 1}: {err['msg']}") from None
    return anns


def load_qa(path: str | Path) -> list[QAPair]:
    return [QAPair(**row) for row in _read_jsonl(Path(path), "QA pairs")]


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise MissingArtifactError("manifest", str(path))
    with open(path, encoding="utf-8") as f:
        return Manifest(**json.load(f))


def frame_path(sequence_id: int, frame_id: int, image_format: str = "png") -> str:
    return f"frames/seq{sequence_id:02d}/frame{frame_id:04d}.{image_format}"


def write_dataset(
    out_dir: str | Path,
    style: Style,
    num_sequences: int,
    frames_per_sequence: int,
    seed: int,
    image_size: int = 64,
    image_format: Literal["png", "imgf"] = "png",
) -> Manifest:
    """
    Generate annotations, both QA modes and rendered frames under ``out_dir``.

    Returns:
        The written Manifest. Output is byte-identical for identical arguments.
    """
    if num_sequences < 1 or frames_per_sequence < 1:
        raise ConfigError("datagen needs at least one sequence and one frame per sequence")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = Rng(seed).child(f"datagen/{style}")

    annotations: list[FrameAnnotation] = []
    sequences: list[SequenceEntry] = []
    total = num_sequences * frames_per_sequence

    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TextColumn("[progress.percentage]{task.percentage:>3.0f}%"),
        console=console,
        transient=True,
    ) as progress:
        pbar = progress.add_task("Rendering frames...", total=total)
        for s in range(1, num_sequences + 1):
            frames = []
            for f in range(frames_per_sequence):
                ann = random_annotation(style, s, f, frames_per_sequence, root.child(f"{s}/{f}"))
                rel = frame_path(s, f, image_format)
                save_image(synth_scene(ann, seed, image_size), out / rel)
                annotations.append(ann)
                frames.append(rel)
                progress.update(pbar, advance=1, description=f"Sequence {s}, frame {f}")
            sequences.append(SequenceEntry(sequence_id=s, frames=frames))

    write_jsonl(out / "annotations.jsonl", annotations)
    for mode in ("classification", "sentence"):
        write_jsonl(out / f"qa_{mode}.jsonl", [qa for ann in annotations for qa in generate_qa(ann, mode)])
    manifest = Manifest(style=style, seed=seed, image_size=image_size, sequences=sequences)
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest.model_dump(), f, indent=2, ensure_ascii=False)

    console.print(f"[green]Wrote {total} frames ({style}) to {out}/[/green]")
    return manifest


# --- splits ---


def split_dataset(manifest: Manifest, train_sequences: Iterable[int], test_sequences: Iterable[int]) -> SplitSpec:
    train, test = sorted(set(train_sequences)), sorted(set(test_sequences))
    overlap = sorted(set(train) & set(test))
    if overlap:
        raise ConfigError(f"train and test sequences overlap: {overlap}")
    known = {s.sequence_id for s in manifest.sequences}
    unknown = sorted((set(train) | set(test)) - known)
    if unknown:
        raise ConfigError(f"sequences not in manifest: {unknown}")
    return SplitSpec(
        train_sequences=train,
        test_sequences=test,
        train_frames=manifest.frame_count(train),
        test_frames=manifest.frame_count(test),
    )


def ratio_split(manifest: Manifest, num_test: int) -> SplitSpec:
    """The last ``num_test`` sequences form the test side (11/3 for 14 sequences)."""
    ids = [s.sequence_id for s in manifest.sequences]
    if not 0 < num_test < len(ids):
        raise ConfigError(f"num_test must lie in [1, {len(ids) - 1}], got {num_test}")
    return split_dataset(manifest, ids[:-num_test], ids[-num_test:])


def kfold_splits(manifest: Manifest, k: int) -> list[SplitSpec]:
    """Contiguous sequence folds; every sequence is tested exactly once."""
    ids = [s.sequence_id for s in manifest.sequences]
    if not 2 <= k <= len(ids):
        raise ConfigError(f"k must lie in [2, {len(ids)}], got {k}")
    folds = [list(map(int, chunk)) for chunk in np.array_split(np.asarray(ids), k)]
    return [split_dataset(manifest, [i for i in ids if i not in fold], fold) for fold in folds]


def save_split(split: SplitSpec, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(split.model_dump(), f, indent=2, ensure_ascii=False)


def load_split(path: str | Path) -> SplitSpec:
    if not Path(path).exists():
        raise MissingArtifactError("split", str(path))
    with open(path, encoding="utf-8") as f:
        return SplitSpec(**json.load(f))


def clip_for_frame(manifest: Manifest, sequence_id: int, frame_index: int) -> list[str]:
    """Frame paths [t-2, t-1, t]; the first frame repeats at sequence start."""
    frames = manifest.sequence(sequence_id).frames
    if not 0 <= frame_index < len(frames):
        raise ConfigError(f"frame {frame_index} outside sequence {sequence_id} of {len(frames)} frames")
    return [frames[max(0, frame_index - lag)] for lag in (2, 1, 0)]
