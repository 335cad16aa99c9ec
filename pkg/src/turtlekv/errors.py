"""Exception types raised across the engine."""


class TurtleKVError(Exception):
    """Base class for every error raised by this package."""


class ContractViolation(TurtleKVError):
    """An operation was called with arguments that break its preconditions."""


class EmptyBatch(ContractViolation):
    pass


class InvalidParameter(TurtleKVError, ValueError):
    pass


class InvalidArgument(TurtleKVError, ValueError):
    """User-supplied key or value outside the configured limits."""


class BufferFull(TurtleKVError):
    """A buffer cascade ran past the last level; the caller has to flush first."""


class IOFailure(TurtleKVError, OSError):
    pass


class OutOfSpace(IOFailure):
    pass


class UseAfterFree(TurtleKVError):
    pass


class RecordTooLarge(TurtleKVError):
    pass


class RecoveryHalt(TurtleKVError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class OpenFailure(TurtleKVError):
    pass
