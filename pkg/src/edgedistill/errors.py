"""Exception hierarchy shared by every stage of the pipeline."""


class EdgeDistillError(Exception):
    """Base class for all package errors."""


class ConfigurationError(EdgeDistillError, ValueError):
    """Shapes, sizes or settings are inconsistent with each other."""


class ValidationError(EdgeDistillError, ValueError):
    """An input value violates a documented invariant."""


class ManifestLoadError(EdgeDistillError, OSError):
    """A manifest file could not be read or parsed."""


class WriteError(EdgeDistillError, OSError):
    """Writing an artifact to disk failed."""


class CapacityError(ValidationError):
    """More unique items were requested than the vocabulary can produce."""


class InsufficientDataError(ValidationError):
    """A source dataset is too small for the requested selection."""


class TrainingError(EdgeDistillError, RuntimeError):
    """Training diverged or could not start."""


class TransportError(EdgeDistillError, RuntimeError):
    """A remote captioner could not be reached within the retry budget."""


class ExpansionError(EdgeDistillError, RuntimeError):
    """Caption synthesis failed for a specific image."""

    def __init__(self, image_id: str, message: str):
        super().__init__(f"caption expansion failed for {image_id!r}: {message}")
        self.image_id = image_id
