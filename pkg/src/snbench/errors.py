"""Exception types shared across the package."""


class SnbenchError(Exception):
    """Base class for all package errors."""


class InvalidSpace(SnbenchError):
    pass


class Disconnected(SnbenchError):
    """Encoding has no input-to-output path after pruning."""


class TooLarge(SnbenchError):
    """Space exceeds the configured enumeration cap."""


class InvalidK(SnbenchError):
    pass


class ShapeMismatch(SnbenchError):
    pass


class DegenerateBatch(SnbenchError):
    pass


class BadLabel(SnbenchError):
    pass


class NotScalarLoss(SnbenchError):
    pass


class IncompatibleMapping(SnbenchError):
    pass


class TooManyChannels(SnbenchError):
    pass


class UnknownEdge(SnbenchError):
    pass


class BadKernelSize(SnbenchError):
    pass


class DivergedTraining(SnbenchError):
    pass


class LengthMismatch(SnbenchError):
    pass


class BadRank(SnbenchError):
    pass


class NotFound(SnbenchError):
    """Missing oracle record (also raised as a table miss during search)."""


class IndexMissing(SnbenchError):
    """Class-uniform sampling requested without an enumeration index."""


class ParseError(SnbenchError):
    pass


class SchemaError(SnbenchError):
    pass


class MismatchedArchSet(SnbenchError):
    pass


class TooFewPoints(SnbenchError):
    pass
