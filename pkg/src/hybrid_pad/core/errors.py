"""Exception hierarchy shared by all pipeline stages."""
from pathlib import Path
from typing import Optional, Union


class HybridPadError(Exception):
    """Base class for all library errors."""


class SceneFormatError(HybridPadError):
    """A scene directory, manifest, image or mask could not be used."""

    def __init__(self, message: str, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        super().__init__(f"{message}: {path}" if path is not None else message)


class BundleFormatError(HybridPadError):
    """A model bundle file is truncated, corrupt or written by an incompatible version."""

    def __init__(self, message: str, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        super().__init__(f"{message}: {path}" if path is not None else message)


class ReconstructionError(HybridPadError):
    """Sparse reconstruction preconditions not met."""


class LocalizationError(HybridPadError):
    """A query could not be localized against the sparse model."""

    def __init__(self, reason: str, n_matches: int = 0, n_inliers: int = 0):
        self.reason = reason
        self.n_matches = n_matches
        self.n_inliers = n_inliers
        super().__init__(f"{reason} (matches={n_matches}, inliers={n_inliers})")


class MetricError(HybridPadError):
    """A metric is undefined for the given input."""


class TrainingDivergedError(HybridPadError):
    """Training loss became non-finite."""

    def __init__(self, iteration: int, loss: float):
        self.iteration = iteration
        self.loss = loss
        super().__init__(f"Training diverged at iteration {iteration} (loss={loss})")


class StageError(HybridPadError):
    """Failure of a named pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
