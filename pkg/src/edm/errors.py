"""Exception hierarchy shared by every stage of the pipeline."""


class EDMError(Exception):
    """Base class for all errors raised by this package."""


class DataError(EDMError):
    """Invalid input data, schema mismatch or failed validation."""


class LadderSyntaxError(DataError):
    def __init__(self, message, line, column):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class LadderError(DataError):
    """A ladder that parses but violates a structural invariant."""


class MissingVariableError(DataError, KeyError):
    def __init__(self, name):
        super().__init__(f"record has no value for variable {name!r}")
        self.name = name

    def __str__(self):
        return self.args[0]


class ClassMapError(DataError):
    pass


class TrainingDivergedError(EDMError):
    def __init__(self, epoch, which="train"):
        super().__init__(f"non-finite {which} MSE at epoch {epoch}")
        self.epoch = epoch
