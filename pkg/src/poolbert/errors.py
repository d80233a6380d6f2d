"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: usage errors are raised by click itself,
``DataError``/``FormatError`` map to exit code 2, ``InvariantError`` to 3.
"""


class PoolbertError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PoolbertError):
    """Tensor or parameter dimensions do not line up."""


class ParameterError(PoolbertError):
    """A hyperparameter or argument value is out of its valid range."""


class DataError(PoolbertError):
    """Invalid input data: malformed codes, bad ids, empty corpora, etc."""


class FormatError(PoolbertError):
    """A persisted artifact (checkpoint, vocab, config, CSV) is malformed."""


class InvariantError(PoolbertError):
    """An internal invariant was violated (non-finite values, tape reuse)."""
