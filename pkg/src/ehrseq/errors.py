"""Exception hierarchy shared across the package."""


class EhrseqError(Exception):
    """Base class for all package errors."""


class UsageError(EhrseqError):
    """Bad CLI arguments or configuration. Exit code 1."""


class DataError(EhrseqError):
    """Malformed or inconsistent input data. Exit code 2."""


class DivergenceError(EhrseqError):
    """Non-finite numerics during training. Exit code 3."""


class DuplicateEntryError(DataError):
    pass


class OversizeVisitError(DataError):
    pass


class MalformedSequenceError(DataError):
    pass


class CheckpointFormatError(DataError):
    pass
