class FixedPointError(RuntimeError):
    """Root of every error raised by fixedpoint_tools."""


# linalg
class NonSquare(FixedPointError):
    pass


class NonFinite(FixedPointError):
    pass


class Singular(FixedPointError):
    pass


class SingularBasis(FixedPointError):
    pass


# models
class BadSpec(FixedPointError):
    pass


class Diverged(FixedPointError):
    pass


class DimensionMismatch(FixedPointError):
    pass


class DatasetError(FixedPointError):
    def __init__(self, line, reason):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class InputFileError(FixedPointError):
    """A prototype, matrix or SAE file that cannot be used."""

    def __init__(self, path, reason):
        self.path = path
        self.reason = reason
        super().__init__(f"{path}: {reason}")


# explainers
class EmptyCandidateSet(FixedPointError):
    pass


class EmptyClass(FixedPointError):
    pass


class NoHiddenTap(FixedPointError):
    pass


class TooManyPatterns(FixedPointError):
    pass


# engine
class NonDeterministicStep(FixedPointError):
    pass


class NoCycleWithinBudget(FixedPointError):
    pass


class MissingContext(FixedPointError):
    pass


# report
class EmptyGroup(FixedPointError):
    pass


class MissingLabels(FixedPointError):
    pass


class IoFailure(FixedPointError):
    pass


# config
class ConfigError(FixedPointError):
    pass


class ParseError(ConfigError):
    def __init__(self, line, key, reason=""):
        self.line = line
        self.key = key
        msg = f"line {line}"
        if key:
            msg += f", key '{key}'"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class ValidationError(ConfigError):
    def __init__(self, key, reason):
        self.key = key
        self.reason = reason
        super().__init__(f"{key}: {reason}")
