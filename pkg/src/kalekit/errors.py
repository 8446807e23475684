"""Exception hierarchy. Each class carries the CLI exit code it maps to."""

from __future__ import annotations


class KaleError(Exception):
    """Base class for every error raised by the toolkit."""

    exit_code = 2


class UsageError(KaleError):
    exit_code = 1


class InputError(KaleError, ValueError):
    pass


class DimensionError(InputError):
    pass


class ParameterError(KaleError, ValueError):
    pass


class ConfigurationError(KaleError, ValueError):
    pass


class SpecError(ConfigurationError):
    """Synthetic dataset spec cannot be satisfied."""


class ParseError(InputError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.path = path


class FormatError(InputError):
    """Binary file has the wrong magic or is truncated."""


class NumericError(KaleError, ArithmeticError):
    exit_code = 3


class DivergenceUndefinedError(NumericError):
    pass


class TrainingDivergedError(NumericError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class HarnessError(KaleError):
    pass


class PipelineError(KaleError):
    def __init__(self, message: str, stage: str | None = None):
        super().__init__(f"[{stage}] {message}" if stage else message)
        self.stage = stage


class StaleArtifactError(PipelineError):
    pass
