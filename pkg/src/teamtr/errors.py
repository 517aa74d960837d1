"""Exception hierarchy. CLI exit codes key off these classes."""


class TeamTRError(Exception):
    exit_code = 1


class ConfigError(TeamTRError, ValueError):
    exit_code = 2


class UsageError(TeamTRError, ValueError):
    exit_code = 2


class ValidationError(TeamTRError, ValueError):
    exit_code = 2


class DomainError(TeamTRError, ValueError):
    exit_code = 2


class InitializationError(TeamTRError, ValueError):
    exit_code = 2


class EstimationError(TeamTRError, ValueError):
    exit_code = 3


class NumericalError(TeamTRError, ArithmeticError):
    exit_code = 3


class CapacityError(TeamTRError, MemoryError):
    exit_code = 4
