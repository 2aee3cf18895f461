"""Exception hierarchy and the process exit codes the CLI maps them to."""


class CascError(Exception):
    """Base class for all engine errors."""

    exit_code = 1


class ConfigError(CascError):
    """Invalid configuration value or malformed config file."""

    exit_code = 2


class DependencyError(CascError):
    """A pipeline stage was requested but an upstream artifact is missing."""

    exit_code = 3


class BackendError(CascError):
    """Failure raised by (or on behalf of) a model backend."""

    exit_code = 4

    def __init__(self, message, code="backend_error", context=None):
        super().__init__(message)
        self.code = code
        self.context = context or {}


class CapabilityError(BackendError):
    """A capability was invoked that the backend does not declare."""

    def __init__(self, message, context=None):
        super().__init__(message, code="unsupported_capability", context=context)


class StateError(BackendError):
    """Backend lifecycle violation, e.g. predict before train."""

    def __init__(self, message, context=None):
        super().__init__(message, code="state_error", context=context)


class ProtocolError(BackendError):
    """Malformed frame or payload on the external backend wire."""

    def __init__(self, message, context=None):
        super().__init__(message, code="protocol_error", context=context)


class ShapeError(CascError):
    """Array arguments have incompatible or invalid shapes."""


class InvalidEmbeddingError(CascError):
    """An embedding vector violates its contract (e.g. zero norm)."""


class ContractError(CascError):
    """A semantic precondition was violated by the caller."""


class NoRoiError(CascError):
    """Prompt construction was asked to work on an empty region."""


class EmptyPoolError(CascError):
    """A training pool operation received no entries."""
