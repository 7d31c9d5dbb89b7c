"""Exception hierarchy.

Every error carries a short ``category`` used by the CLI to print a
machine-parsable one-line error.
"""


class SGLError(Exception):
    category = "error"


class ShapeError(SGLError, ValueError):
    category = "shape"


class DomainError(SGLError, ValueError):
    category = "domain"


class ConfigError(SGLError, ValueError):
    category = "config"


class ParameterError(ConfigError):
    category = "parameter"


class ContractError(SGLError, RuntimeError):
    category = "contract"


class OracleError(SGLError, ArithmeticError):
    category = "oracle"


class VocabError(SGLError, IndexError):
    category = "vocab"


class LabelError(SGLError, ValueError):
    category = "label"


class NumericError(SGLError, ArithmeticError):
    category = "numeric"


class InvariantError(SGLError, ValueError):
    category = "invariant"


class ParseError(SGLError, ValueError):
    category = "parse"

    def __init__(self, message, record=None):
        if record is not None:
            message = f"record {record}: {message}"
        super().__init__(message)
        self.record = record


class VersionError(SGLError, ValueError):
    category = "version"
