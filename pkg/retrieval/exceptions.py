# ============================================
# FILE: retrieval/exceptions.py
# ============================================


class StemError(Exception):
    """Base class for every error raised by the retrieval app."""


class ConfigError(StemError):
    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = errors or {}


class GraphParseError(StemError):
    def __init__(self, line_number, reason):
        super().__init__(f"line {line_number}: {reason}")
        self.line_number = line_number


class UnknownEntityError(StemError, KeyError):
    def __str__(self):
        return f"unknown entity: {self.args[0]!r}"


class ContractViolation(StemError):
    pass


class EncoderArgumentError(StemError, ValueError):
    pass


class EncoderTransportError(StemError):
    def __init__(self, message, retries):
        super().__init__(f"{message} (after {retries} retries)")
        self.retries = retries


class ChatTransportError(StemError):
    pass


class FixtureMissingError(StemError, KeyError):
    def __str__(self):
        return f"no recorded completion for prompt {self.args[0]}"


class PlanParseError(StemError, ValueError):
    pass


class TripleParseError(StemError, ValueError):
    pass


class PlaceholderProvenanceError(StemError, ValueError):
    pass


class AnchoringError(StemError):
    pass


class NumericError(StemError, ArithmeticError):
    pass


class GnnConfigError(StemError, ValueError):
    pass


class SamplingError(StemError):
    pass


class MaskingError(StemError):
    pass


class ReverseGenerationError(StemError, ValueError):
    pass
