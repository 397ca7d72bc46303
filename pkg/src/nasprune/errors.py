"""Exception hierarchy shared by every stage of the pipeline."""


class NasPruneError(Exception):
    """Base class; the CLI prints ``<ClassName>: <message>`` for these."""


class DimensionError(NasPruneError, ValueError):
    pass


class ContractError(NasPruneError):
    """A caller broke an operation's precondition."""


class ConfigError(NasPruneError, ValueError):
    pass


class InputError(NasPruneError, ValueError):
    pass


class GridError(NasPruneError):
    pass


class StateError(NasPruneError):
    """Pipeline stages invoked out of order."""


class TrainingError(NasPruneError):
    pass


class GradCheckError(NasPruneError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class CheckpointError(NasPruneError):
    pass


class SchemaVersionError(CheckpointError):
    pass


class CorruptTableError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass
