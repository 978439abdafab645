"""Exception hierarchy. The CLI maps each category to its own exit status."""


class SplatmarkError(Exception):
    exit_code = 1


class ConfigError(SplatmarkError, ValueError):
    exit_code = 2


class CapacityError(SplatmarkError, ValueError):
    exit_code = 3


class CorruptionError(SplatmarkError):
    exit_code = 4


class DivergenceError(SplatmarkError, ArithmeticError):
    exit_code = 5


class FormatError(SplatmarkError, ValueError):
    exit_code = 6
