"""Shared error types mapped onto the CLI exit-code contract.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations


class EngineError(Exception):
    """Base class for all engine-raised errors."""


class DataFormatError(EngineError):
    """A file or payload violates one of the on-disk format contracts.

    ``code`` is a stable machine-readable identifier so callers can
    distinguish failure kinds without parsing messages.
    """

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# Stable DataFormatError codes.
BAD_MAGIC = "bad_magic"
BAD_VERSION = "bad_version"
TRUNCATED = "truncated"
TRAILING_DATA = "trailing_data"
DIM_MISMATCH = "dim_mismatch"
NAN_PAYLOAD = "nan_payload"
LABEL_TASK_MISMATCH = "label_task_mismatch"
BAD_MANIFEST = "bad_manifest"


class NumericFailureError(EngineError):
    """Raised when training produces a non-finite loss; aborts the run."""


class ModeMismatchError(EngineError, ValueError):
    """An operation was invoked with a run mode it does not support."""


class PolicyMismatchError(EngineError, ValueError):
    """A buffer update was invoked against a memory with another policy."""
