"""Exception hierarchy.

The CLI maps ``DataError`` to exit code 2 and ``InfeasibleError`` to exit
code 3; anything else escaping a subcommand is a bug.
"""


class DdxError(Exception):
    """Base class for all toolkit errors."""


class DataError(DdxError, ValueError):
    """Input data violates a contract (ordering, schema, parse, range)."""


class FlowOrderError(DataError):
    def __init__(self, index, prev_ts, ts):
        super().__init__(f"packet {index} has ts_us={ts} earlier than previous ts_us={prev_ts}")
        self.index = index


class CsvParseError(DataError):
    def __init__(self, row, column, value):
        super().__init__(f"cannot parse {value!r} at row {row}, column {column!r}")
        self.row = row
        self.column = column


class MissingColumnError(DataError):
    def __init__(self, column):
        super().__init__(f"missing column {column!r}")
        self.column = column


class UnknownLabelError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class SchemaMismatchError(DataError):
    pass


class PipelineFormatError(DataError):
    pass


class ConfigError(DdxError, ValueError):
    """Invalid parameters (generator profiles, hyperparameters, rates)."""


class InfeasibleError(DdxError):
    """A configuration that cannot be executed on the given data."""


class GenomeInfeasibleError(InfeasibleError):
    pass


class CvInfeasibleError(InfeasibleError):
    pass


class ExactLimitError(InfeasibleError):
    pass
