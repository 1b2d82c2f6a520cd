"""Exception hierarchy shared across the package."""


class BarkidError(Exception):
    """Base class for all package errors."""


class ParameterError(BarkidError):
    """A parameter is outside its documented range."""


class FormatError(BarkidError):
    """A file does not conform to an expected on-disk format."""


class ValidationError(BarkidError):
    """Data violates a documented invariant (e.g. descriptor norm)."""


class EstimationError(BarkidError):
    """Geometric estimation failed (too few or degenerate correspondences)."""


class ProjectionError(BarkidError):
    """A point projects to infinity under a homography."""


class TrainingError(BarkidError):
    """Vocabulary training cannot proceed (e.g. fewer samples than clusters)."""


class ExtractionError(BarkidError):
    """Signature extraction failed (e.g. provider missing a descriptor)."""


class LoadError(BarkidError):
    """A persisted artifact cannot be loaded (corruption, hash mismatch)."""
