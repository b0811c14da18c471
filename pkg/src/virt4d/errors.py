"""Exception hierarchy shared across the engine."""


class Virt4dError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(Virt4dError):
    """A descriptor, partition plan, or analysis spec violates an invariant."""


class SidecarParseError(Virt4dError):
    """Malformed sidecar file; message carries line/field context."""


class CodecError(Virt4dError):
    """Misaligned or out-of-range buffer handed to a codec routine."""


class BackendUnsupportedError(Virt4dError):
    """The requested read backend is not available on this platform/filesystem."""


class TruncatedPartitionError(Virt4dError):
    """A partition file was shorter than its declared byte length."""


class SchedulingError(Virt4dError):
    """Task assignment was impossible (e.g. empty worker pool)."""


class JobStateError(Virt4dError):
    """An operation was attempted in an illegal job state."""
