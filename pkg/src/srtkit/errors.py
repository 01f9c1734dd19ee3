"""Exception types with stable machine-readable codes.

Codes are grouped by layer: E0xx input parsing and schema, E1xx design and
assignment data, E2xx estimator preconditions, E3xx model configuration,
E4xx reproducibility.
"""


class SRTError(Exception):
    code = "E000"

    def __init__(self, message, code=None):
        super().__init__(message)
        if code is not None:
            self.code = code

    def __str__(self):
        return f"{self.code}: {self.args[0]}"


class ParseError(SRTError):
    code = "E001"


class SchemaError(SRTError):
    code = "E002"


class UnknownArmError(SRTError):
    code = "E101"


class IncompleteHistoryError(SRTError):
    code = "E102"


class DuplicateLearnerError(SRTError):
    code = "E103"


class DesignError(SRTError):
    code = "E104"


class PreconditionError(SRTError):
    code = "E201"


class InsufficientDataError(SRTError):
    code = "E202"


class SeparationError(SRTError):
    code = "E203"


class PostRandomizationModeratorError(SRTError):
    code = "E204"


class CollinearityError(SRTError):
    code = "E205"


class ConfigurationError(SRTError):
    code = "E301"


class ManifestMismatchError(SRTError):
    code = "E401"


class UsageError(SRTError):
    code = "E003"
