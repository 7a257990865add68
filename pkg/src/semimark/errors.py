"""Exception hierarchy shared by all semimark modules."""


class SemimarkError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(SemimarkError):
    """Caller passed data violating an operation's preconditions."""


class ConfigurationError(SemimarkError):
    """A configuration is internally inconsistent or unusable."""


class ContractViolationError(SemimarkError):
    """An operation was invoked in a mode its contract forbids."""


class AdapterMissingError(SemimarkError):
    """An external adapter (codec, metric backend) is not available.

    The message must tell the user how to register or install the
    missing piece; this error is never swallowed silently.
    """


class CorpusError(SemimarkError):
    """Corpus directory is empty, unreadable, or otherwise unusable."""


class CheckpointError(SemimarkError):
    """Checkpoint file is missing, corrupt, or config-incompatible."""


class TrainingDivergedError(SemimarkError):
    """Training hit a non-finite loss; diagnostics were dumped."""
