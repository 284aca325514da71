"""Exception hierarchy shared by all openguard components."""


class OpenGuardError(Exception):
    pass


# event source
class EmptyFragments(OpenGuardError, ValueError):
    pass


class InvalidComponent(OpenGuardError, ValueError):
    pass


class ProbeAttachFailed(OpenGuardError):
    """The kernel probe could not be attached; callers may fall back to fs_notify."""


class SourceUnavailable(OpenGuardError):
    pass


class ParseError(OpenGuardError, ValueError):
    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class ClockSkewWarning(UserWarning):
    """Trace timestamps went backwards; events are still yielded in file order."""


# backup engine
class CopyFailed(OpenGuardError, OSError):
    pass


class NotARegularFile(OpenGuardError, ValueError):
    pass


class SignalDenied(OpenGuardError, PermissionError):
    pass


class BackupMissing(OpenGuardError, FileNotFoundError):
    pass


class RenameFailed(OpenGuardError, OSError):
    pass


class NotRegistered(OpenGuardError, KeyError):
    pass


# detection
class NoEventsForPid(OpenGuardError, ValueError):
    pass


class ModelLoadFailed(OpenGuardError):
    pass


class FeatureDimensionMismatch(OpenGuardError, ValueError):
    pass


class ClockInconsistency(OpenGuardError, ValueError):
    pass


class LengthMismatch(OpenGuardError, ValueError):
    pass


class KillFailed(OpenGuardError):
    pass


# harness / metrics
class RootNotEmpty(OpenGuardError):
    pass


class RootMissing(OpenGuardError, FileNotFoundError):
    pass


class NegativeCount(OpenGuardError, ValueError):
    pass


class ConfigError(OpenGuardError, ValueError):
    pass


class TrialFailed(OpenGuardError):
    pass
