"""Exception hierarchy shared by every module.

Each class carries the CLI exit code used when it escapes to the top level.
"""


class MixGANError(Exception):
    exit_code = 1


class ParameterError(MixGANError, ValueError):
    exit_code = 3


class ShapeError(MixGANError, ValueError):
    exit_code = 3


class ConfigError(MixGANError, ValueError):
    exit_code = 3


class DataError(MixGANError):
    exit_code = 4


class NumericError(MixGANError, ArithmeticError):
    exit_code = 5


class CapabilityError(MixGANError):
    exit_code = 6


class CountError(MixGANError, ValueError):
    exit_code = 4
