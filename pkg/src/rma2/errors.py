"""Exception types raised across the package."""


class Rma2Error(Exception):
    """Base class for every fault raised by this package."""


class NonFiniteError(Rma2Error, FloatingPointError):
    """A NaN or Inf showed up where only finite values are allowed."""


class ShapeError(Rma2Error, ValueError):
    """Array shapes do not compose."""


class ConfigError(Rma2Error, ValueError):
    """Invalid or unknown configuration."""


class CheckpointError(Rma2Error):
    """Checkpoint is malformed, tampered with, or bound to another digest."""


class PrivilegedAccessError(Rma2Error):
    """A deployable agent tried to touch simulator-only information."""


def check_finite(arr, where: str) -> None:
    import numpy as np

    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(np.asarray(arr)))
        raise NonFiniteError(f"non-finite values in {where} at indices {bad[:5].tolist()}")
