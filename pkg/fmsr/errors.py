"""Exception hierarchy shared by the library and the command line."""

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


class FMSRError(Exception):
    exit_code: int = 1


class ValidationError(FMSRError, ValueError):
    """Bad shapes, grids, catalogs, configuration or violated preconditions."""

    exit_code = EXIT_VALIDATION


class StaleTapeError(ValidationError):
    pass


class StoreError(ValidationError):
    pass


class HashMismatchError(StoreError):
    pass


class SchemaVersionError(StoreError):
    pass


class MissingInputError(StoreError):
    pass


class NumericalError(FMSRError, ArithmeticError):
    """NaN losses, non-finite sampler states and other numerical breakdowns."""

    exit_code = EXIT_NUMERICAL
