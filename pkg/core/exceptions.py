from pathlib import Path
from typing import Optional


class LFDAError(Exception):
    """Base class of every error raised by this package."""


class ConfigError(LFDAError, ValueError):
    """Invalid or unknown configuration value."""


class ShapeError(LFDAError, ValueError):
    """Tensor shape does not satisfy an operation's contract."""


class RoutingError(LFDAError, KeyError):
    """Unknown BN branch or forbidden depth route."""

    def __str__(self) -> str:
        # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


class DegenerateBatchError(LFDAError, ValueError):
    """Train-mode batch normalization over a single sample."""


class EmptyMaskError(LFDAError, ValueError):
    """A masked reduction received no valid pixels."""


class InvalidDepthError(LFDAError, ValueError):
    """Depth values outside of the admissible range."""


class NegativeLossError(LFDAError, ValueError):
    """A loss component that must be non-negative is not."""


class NonFiniteLossError(LFDAError, FloatingPointError):
    def __init__(self, term: str, value: float, step: Optional[int] = None) -> None:
        """
        Constructor

        Args:
            term (str): name of the offending loss term
            value (float): its value
            step (Optional[int]): training step at which it was observed
        """
        self.term = term
        self.value = value
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"Loss term '{term}' is not finite ({value}){where}")


class DataFormatError(LFDAError, ValueError):
    """Corrupt or unsupported on-disk data."""


class DatasetIOError(LFDAError, OSError):
    def __init__(self, path: Path, reason: str) -> None:
        self.path = Path(path)
        super().__init__(f"{reason}: {self.path}")


class CheckpointMismatchError(LFDAError, ValueError):
    """Checkpoint was produced under a different configuration or dataset."""
