"""Error types and user-facing error messages."""

from __future__ import annotations

from typing import Iterable, Sequence


class OutcropError(Exception):
    """Base class for every error raised by the toolkit."""


class UserInputError(OutcropError, ValueError):
    """Bad arguments, paths or configuration supplied by the user."""


class BackendUnavailableError(OutcropError):
    """A model backend could not be reached in time; the call may be retried."""


class BackendResponseError(OutcropError):
    """A model backend answered with a payload that cannot be used."""


class RecordDiscarded(OutcropError):
    """A dataset record was dropped during generation."""

    def __init__(self, record_id: str, reason: str) -> None:
        super().__init__(f"record {record_id} discarded: {reason}")
        self.record_id = record_id
        self.reason = reason


class TrainingDivergedError(OutcropError):
    """The training loss became non-finite."""

    def __init__(self, step: int, batch_ids: Sequence[str], dump_path: str | None = None) -> None:
        message = f"non-finite loss at step {step} (batch ids: {', '.join(batch_ids)})"
        if dump_path:
            message += f"; diagnostics written to {dump_path}"
        super().__init__(message)
        self.step = step
        self.batch_ids = list(batch_ids)
        self.dump_path = dump_path


class PipelineStageError(OutcropError):
    """Wraps a failure with the name of the pipeline stage that raised it."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


def describe_backend_error(exc: Exception) -> str:
    """Produce a user-friendly message for transport-level backend failures."""

    network_errors: Iterable[str] = (
        "ConnectionError",
        "Timeout",
        "HTTPError",
        "URLError",
        "SSLError",
        "ProxyError",
    )

    exc_name = exc.__class__.__name__
    message = str(exc)
    lowered_message = message.lower()

    if any(keyword in exc_name for keyword in network_errors):
        return (
            "Network issue while contacting the model backend. Check that the service "
            "URL is reachable or retry in a few minutes."
        )

    if any(marker in lowered_message for marker in ("connection refused", "timed out", "timeout")):
        return "The model backend did not answer in time. Raise the timeout or retry later."

    return message
