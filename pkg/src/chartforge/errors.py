"""Exception types shared across the pipeline."""


class ChartforgeError(Exception):
    """Base class for all chartforge errors."""


class ConfigError(ChartforgeError):
    """Invalid or inconsistent run configuration."""


class FormatError(ChartforgeError):
    """A model response did not follow the required output contract."""


class GenerationFailedError(ChartforgeError):
    """All generation attempts for one seed were exhausted.

    Carries the per-attempt failure reasons so callers can report them.
    """

    def __init__(self, message: str, reasons: list[str]):
        super().__init__(message)
        self.reasons = reasons


class CacheMissError(ChartforgeError):
    """Replay backend has no recorded exchange for a request digest."""

    def __init__(self, digest: str):
        super().__init__(f"no cached exchange for request digest {digest}")
        self.digest = digest


class BackendError(ChartforgeError):
    """The live chat backend failed after exhausting retries."""

    def __init__(self, message: str, status_code: int | None = None):
        super().__init__(message)
        self.status_code = status_code


class ContractError(ChartforgeError):
    """A caller violated an operation's precondition."""


class RubricParseError(ChartforgeError):
    """Evaluator output was missing or malformed score lines."""

    def __init__(self, message: str, offending_lines: list[str] | None = None):
        super().__init__(message)
        self.offending_lines = offending_lines or []


class SandboxEnvironmentError(ChartforgeError):
    """The sandbox runtime itself is unavailable or broken.

    Distinct from script failure, which is reported as a render status.
    """


class DatasetError(ChartforgeError):
    """Dataset directory is missing, incomplete, or would be clobbered."""
