"""
Error Types Module
Exception hierarchy for the toolkit and the process exit codes they map to
"""

EXIT_OK = 0
EXIT_CONFIGURATION = 2
EXIT_INPUT_FORMAT = 3
EXIT_BACKEND = 4
EXIT_INTERNAL = 5


class ToolkitError(Exception):
    """Base class for every error the toolkit raises on purpose."""

    exit_code = EXIT_INTERNAL


class ConfigurationError(ToolkitError):
    """Invalid flags, environment variables or config values."""

    exit_code = EXIT_CONFIGURATION


class InputFormatError(ToolkitError):
    """A corpus, trace or scored file could not be parsed."""

    exit_code = EXIT_INPUT_FORMAT


class DuplicatePromptError(InputFormatError):
    """Two prompt records share an id."""

    def __init__(self, prompt_id: str, line_number: int = None):
        self.prompt_id = prompt_id
        location = f" (line {line_number})" if line_number else ""
        super().__init__(f"Duplicate prompt id '{prompt_id}'{location}")


class SchemaVersionError(InputFormatError):
    """A trace or scored record declares an unsupported schema version."""

    def __init__(self, found, supported: str, line_number: int = None):
        self.found = found
        self.supported = supported
        location = f"line {line_number}: " if line_number else ""
        super().__init__(
            f"{location}unsupported schema_version {found!r} (supported: {supported!r})"
        )


class BackendError(ToolkitError):
    """The inference backend failed after retries."""

    exit_code = EXIT_BACKEND


class LogprobsUnavailableError(BackendError):
    """The backend answered without per-token log probabilities."""


class SamplingError(BackendError):
    """Fewer than the requested number of samples could be collected."""

    def __init__(self, message: str, succeeded: int, requested: int):
        self.succeeded = succeeded
        self.requested = requested
        super().__init__(message)


class InsufficientSupportError(ToolkitError, ValueError):
    """Variance was requested from fewer than two log probabilities."""
