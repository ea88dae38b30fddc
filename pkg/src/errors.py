"""
Error types shared across the pipeline.

Every error carries a short machine-readable ``reason`` so the CLI can
report failures as a single ``error: <reason>: <message>`` line.
"""


class VQAError(Exception):
    """Base class for all pipeline errors."""

    reason = "error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def one_line(self) -> str:
        text = " ".join(self.message.split())
        return f"error: {self.reason}: {text}"


class ShapeError(VQAError, ValueError):
    reason = "shape"


class ContractError(VQAError, RuntimeError):
    reason = "contract"


class TargetIndexError(VQAError, IndexError):
    reason = "index"


class EmptyInputError(VQAError, ValueError):
    reason = "empty"


class AnnotationError(VQAError, ValueError):
    """Malformed frame annotation. ``field`` names the offending field."""

    reason = "annotation"

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class CheckpointError(VQAError, ValueError):
    reason = "checkpoint"


class ConfigError(VQAError, ValueError):
    reason = "config"


class ConfigMismatchError(VQAError, ValueError):
    """Checkpoint and dataset/run config disagree on ``fields``."""

    reason = "config-mismatch"

    def __init__(self, fields: dict[str, tuple[object, object]]):
        parts = [f"{k} (checkpoint={a!r}, requested={b!r})" for k, (a, b) in sorted(fields.items())]
        super().__init__("differing fields: " + "; ".join(parts))
        self.fields = fields


class MissingArtifactError(VQAError, FileNotFoundError):
    reason = "missing-artifact"

    def __init__(self, artifact: str, path: str):
        super().__init__(f"{artifact} not found: {path}")
        self.artifact = artifact
        self.path = path
