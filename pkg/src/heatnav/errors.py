"""Typed errors shared across the toolkit.

Every error the library raises deliberately derives from HeatnavError so CLI
entry points can catch one type and exit with a single typed line.
"""


class HeatnavError(Exception):
    pass


class EmptySources(HeatnavError):
    pass


class PoseOutOfBounds(HeatnavError):
    pass


class PixelOutOfBounds(HeatnavError):
    pass


class UnknownInstance(HeatnavError):
    pass


class ShapeMismatch(HeatnavError):
    pass


class BadDimensions(HeatnavError):
    pass


class StepOutOfRange(HeatnavError):
    pass


class EmptyDataset(HeatnavError):
    pass


class EmptyInput(HeatnavError):
    pass


class AdapterTimeout(HeatnavError):
    pass


class AdapterError(HeatnavError):
    """The adapter answered with an explicit error response."""


class ProtocolViolation(HeatnavError):
    pass


class BadHeatmap(HeatnavError):
    pass


class FormatError(HeatnavError):
    """Malformed binary or JSON payload on disk."""


class StartNotTraversable(HeatnavError):
    pass


class GenerationExhausted(HeatnavError):
    pass


class NoObjects(HeatnavError):
    pass
