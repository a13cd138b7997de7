"""Exception types shared across the package.

Every operation raises one of these instead of bare ValueError/RuntimeError
so the CLI can map failures onto its exit-code contract (2 usage, 3 data,
4 numerical).
"""


class IdInpaintError(Exception):
    """Base class for all package errors."""


class ArgumentError(IdInpaintError):
    """An operation received arguments violating its contract (shape, range)."""


class ConfigurationError(IdInpaintError):
    """A config value is out of range or the config file is malformed."""


class DataError(IdInpaintError):
    """Input data is missing, empty, or unusable (corpus, manifest, run dir)."""


class GeometryError(IdInpaintError):
    """Landmark or box geometry is degenerate (zero-area box, annihilated clip)."""


class NumericalError(IdInpaintError):
    """A numerical domain was violated or non-finite values appeared."""
