"""Exception hierarchy shared by all pcfusion modules."""

from __future__ import annotations


class PcFusionError(Exception):
    """Base class for every error raised by pcfusion."""


class EmptyInput(PcFusionError, ValueError):
    pass


class InvalidParameter(PcFusionError, ValueError):
    pass


class InsufficientPoints(PcFusionError, ValueError):
    pass


class InsufficientData(PcFusionError, ValueError):
    pass


class SizeMismatch(PcFusionError, ValueError):
    pass


class TooLarge(PcFusionError, ValueError):
    pass


class DegenerateOutput(PcFusionError):
    pass


class CollinearNeighborhood(PcFusionError):
    pass


class PlacementFailure(PcFusionError):
    pass


class EmptyScan(PcFusionError):
    pass


class NoOverlap(PcFusionError):
    pass


class MissingNormals(PcFusionError, ValueError):
    pass


class DisconnectedSet(PcFusionError):
    pass


class GraphConstructionFailure(PcFusionError):
    pass


class ConvergenceFailure(PcFusionError):
    """Iteration cap hit; ``best`` holds the best-so-far solution."""

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class ConfigError(PcFusionError, ValueError):
    """Invalid pipeline configuration; ``field`` is the dotted path of the offending entry."""

    def __init__(self, message: str, field: str = ""):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class IoError(PcFusionError, OSError):
    pass


class ParseError(PcFusionError, ValueError):
    """Malformed input file. ``offset`` is the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        text = message if offset is None else f"{message} (at byte offset {offset})"
        super().__init__(text)
        self.offset = offset
