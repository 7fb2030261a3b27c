"""
Error types raised across the lab.
Each subclasses the builtin exception callers would otherwise catch.
"""


class DatasetLoadError(FileNotFoundError):
    """Dataset source missing or empty."""


class DataFormatError(ValueError):
    """Decoded data does not have the expected layout."""


class ParameterError(ValueError):
    """Invalid parameter or config value."""


class SplitOverlapError(ValueError):
    """Private and public label sets intersect."""


class ShapeMismatchError(ValueError):
    """Two arrays/tensors that must agree in shape do not."""


class MaskBoundaryError(ValueError):
    """Mask is all-hidden or all-visible, so no boundary patch exists."""


class AuxModeMismatchError(ValueError):
    """Auxiliary knowledge mode differs from the generator's mode."""


class StrictPositivityError(ValueError):
    """A probability that must be positive is zero."""


class EvaluatorRefusedError(ValueError):
    """Evaluation classifier shares the target network's architecture digest."""


class ConfigError(ValueError):
    """Experiment config failed validation."""


class TrainingDivergedError(RuntimeError):
    """A training loss became non-finite."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class AttackFailedError(RuntimeError):
    """Every restart of an attack aborted."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the partial manifest."""

    def __init__(self, message, manifest=None):
        super().__init__(message)
        self.manifest = manifest


class ReportError(FileNotFoundError):
    """Artifacts needed for a report are missing."""

    def __init__(self, missing):
        super().__init__("Missing artifacts: " + ", ".join(missing))
        self.missing = list(missing)
