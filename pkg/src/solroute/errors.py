"""Shared error types.

Every operational failure carries a stable ``code`` string so callers (and
tests) can branch on the failure class without matching message text.
Type-invariant violations raise plain ``ValueError`` instead; these codes are
reserved for runtime/configuration faults.
"""

from __future__ import annotations


class EngineError(Exception):
    """Base class for operational failures; ``code`` is a stable identifier."""

    code: str = "ENGINE_ERROR"

    def __init__(self, message: str, *, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class ConfigError(EngineError):
    code = "CONFIG_MISSING"


class EmptyModelPoolError(EngineError):
    code = "EMPTY_MODEL_POOL"


class ImageLoadError(EngineError):
    code = "IMAGE_LOAD_FAILED"

    def __init__(self, message: str, *, instance_id: str | None = None):
        super().__init__(message)
        self.instance_id = instance_id


class BackendUnavailableError(EngineError):
    code = "BACKEND_UNAVAILABLE"


class ReplayMissError(EngineError):
    code = "REPLAY_MISS"

    def __init__(self, message: str, *, request_hash: str | None = None):
        super().__init__(message)
        self.request_hash = request_hash


class UnknownModelError(EngineError):
    code = "UNKNOWN_MODEL"


class IdCollisionError(EngineError):
    code = "ID_COLLISION"


class MalformedProposalError(EngineError):
    """Raised when a proposal is missing a section header (or has them out of
    order); ``header`` names the first expected header that was not found in
    its place."""

    code = "MALFORMED_PROPOSAL"

    def __init__(self, header: str):
        super().__init__(f"proposal is missing section {header!r}")
        self.header = header


class TaskInvalidError(EngineError):
    """A task spec failed validation; ``violations`` holds the full report."""

    code = "TASK_INVALID"

    def __init__(self, message: str, *, violations: tuple = ()):
        super().__init__(message)
        self.violations = violations


class ShapeMismatchError(EngineError):
    code = "SHAPE_MISMATCH"


class EmptyPoolError(EngineError):
    code = "EMPTY_POOL"


class TranscriptMissingError(EngineError):
    code = "TRANSCRIPT_MISSING"
