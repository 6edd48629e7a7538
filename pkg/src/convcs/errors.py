"""Exception hierarchy shared by every convcs module.

Each class carries the CLI exit code it maps to: 1 for usage/config
problems, 2 for runtime and numeric failures.
"""


class ConvCSError(Exception):
    exit_code = 2


class ConfigError(ConvCSError, ValueError):
    exit_code = 1


class DimensionError(ConvCSError, ValueError):
    exit_code = 1


class GeometryError(ConvCSError, ValueError):
    exit_code = 1


class ContractError(ConvCSError, RuntimeError):
    exit_code = 1


class NumericError(ConvCSError, ArithmeticError):
    exit_code = 2


class DivergenceError(NumericError):
    pass


class IngestionError(ConvCSError, OSError):
    exit_code = 1


class FormatError(IngestionError):
    pass


class ChecksumError(ConvCSError):
    exit_code = 2


class MigrationError(ConvCSError):
    exit_code = 2


class ArchMismatchError(ConfigError):
    pass
