"""Exception types shared across the toolkit."""


class LesionSegError(Exception):
    """Base class for all toolkit errors."""


class MissingMask(LesionSegError):
    """One or more images have no paired mask file."""

    def __init__(self, unmatched):
        self.unmatched = list(unmatched)
        names = ", ".join(str(p) for p in self.unmatched[:5])
        more = "" if len(self.unmatched) <= 5 else f" (+{len(self.unmatched) - 5} more)"
        super().__init__(f"{len(self.unmatched)} image(s) without a mask: {names}{more}")


class EmptyDataset(LesionSegError):
    """No images were found under the dataset root."""


class InvalidFraction(LesionSegError):
    """Validation fraction outside (0, 1)."""


class DecodeError(LesionSegError):
    """An image or mask file could not be decoded."""


class ShapeMismatch(LesionSegError):
    """Two arrays that must share a shape do not."""


class InvalidConfig(LesionSegError):
    """An augmentation or training configuration is inconsistent."""


class BadReduction(LesionSegError):
    """Channel count not divisible by the attention reduction ratio."""


class BadKernel(LesionSegError):
    """Spatial attention kernel size must be odd."""


class BadBeta(LesionSegError):
    """Tversky beta outside (0, 1)."""


class BadGamma(LesionSegError):
    """Focal exponent must be positive."""


class UnknownLabel(LesionSegError):
    """Model label not in the registry."""


class IncompatibleShape(LesionSegError):
    """Input shape incompatible with the requested architecture."""


class EmptyHistory(LesionSegError):
    """A run history with no epoch records."""


class DivergenceDetected(LesionSegError):
    """Training produced a non-finite loss; the run is aborted."""


class OutOfBudget(LesionSegError):
    """A configured wall-clock budget was exhausted mid-run."""


class IncompleteGrid(LesionSegError):
    """A table was requested over a grid with missing cells."""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"{len(self.missing)} missing grid cell(s): {self.missing[:8]}")
