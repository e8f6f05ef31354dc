"""Exception hierarchy shared across the audit checks."""

from __future__ import annotations


class AuditError(Exception):
    """Base class for every error this package raises deliberately."""


class BundleLoadError(AuditError):
    """A bundle is missing a mandatory part or an adapter is unknown."""


class JudgeError(AuditError):
    """Base for judge backend failures."""


class JudgeTransportError(JudgeError):
    """The backend could not be reached (network, timeout, HTTP 5xx)."""


class MalformedVerdictError(JudgeError):
    """The backend answered, but not with the expected JSON shape."""


class VoteError(JudgeError):
    """A majority vote produced no usable verdicts."""


class ScriptedFixtureMissError(JudgeError):
    """The scripted backend has no fixture for a request fingerprint."""


class ApiError(AuditError):
    """A scholarly API call failed after retries."""


class CacheMissError(AuditError):
    """Offline mode was asked for a response that is not in the cache."""


class ToleranceUndefinedError(AuditError):
    """Adaptive tolerance is undefined (mean of reruns is zero)."""


class CheckError(AuditError):
    """A check could not run at all (as opposed to failing the artifact)."""


class ReportError(AuditError):
    """Aggregation or rendering failed (duplicate ids, unknown format)."""
