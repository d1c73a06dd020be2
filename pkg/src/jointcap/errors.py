"""Exception types raised across the package."""


class JointCapError(Exception):
    pass


class DimensionError(JointCapError, ValueError):
    pass


class ContractError(JointCapError, ValueError):
    pass


class ConfigError(JointCapError, ValueError):
    pass


class EvaluationError(JointCapError, ArithmeticError):
    pass


class ParseError(JointCapError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class RoleError(JointCapError, ValueError):
    pass


class IngestError(JointCapError, ValueError):
    pass


class LoadError(JointCapError, IOError):
    pass
