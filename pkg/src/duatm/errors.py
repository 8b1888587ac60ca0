"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: UsageError -> 1, DataError -> 2,
NumericError -> 3. Everything raised on purpose inside the package derives
from one of those three roots.
"""


class UsageError(Exception):
    """Bad command-line invocation or malformed run configuration."""


class DataError(Exception):
    """Invalid files, manifests, labels, shapes, or protocol preconditions."""


class ShapeError(DataError):
    """Array extents incompatible with an operation; names both shapes."""


class FileFormatError(DataError):
    """Base for structural problems in binary containers."""


class BadMagicError(FileFormatError):
    pass


class BadVersionError(FileFormatError):
    pass


class TruncatedPayloadError(FileFormatError):
    pass


class PayloadMismatchError(FileFormatError):
    """Header-declared extents disagree with the payload length."""


class ProtocolError(DataError):
    """Evaluation-protocol precondition violated (e.g. query without matches)."""


class NumericError(Exception):
    """Numerical failure states that should abort a run."""


class NonFiniteError(NumericError):
    """NaN or Inf encountered where finite values are required."""


class NormalizationError(NumericError):
    """A vector too close to zero to normalize; message names its index."""


class DegenerateBatchError(NumericError):
    """Batch statistics requested over a single row."""
