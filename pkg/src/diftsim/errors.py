"""Exception hierarchy shared by every stage of the pipeline.

The CLI prints ``type(exc).__name__`` on failure, so class names are part of
the user-visible contract.
"""


class DiftError(Exception):
    """Base class for all simulator errors."""


# trace stream
class UnalignedAddress(DiftError):
    pass


class MalformedPacket(DiftError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} at byte offset {offset}"
        super().__init__(message)
        self.offset = offset


class TooManyContexts(DiftError):
    pass


class BranchBeforeSync(DiftError):
    pass


# annotations and policies
class InvalidOperandRange(DiftError):
    pass


class UnknownOpcode(DiftError):
    pass


class InvalidRuleEncoding(DiftError):
    pass


class MissingBlock(DiftError):
    pass


class CorruptHeader(DiftError):
    pass


class TruncatedBlock(DiftError):
    pass


class PolicySyntaxError(DiftError):
    pass


# tag memory
class TmmuFull(DiftError):
    pass


class TmmuMiss(DiftError):
    pass


# coprocessor
class FifoEmpty(DiftError):
    pass


class FifoOverflow(DiftError):
    pass


class HaltedState(DiftError):
    pass


class TooManySlots(DiftError):
    pass


class InstrumentationDesync(DiftError):
    """Instrumentation values were left over after the trace was consumed."""


# toy toolchain
class ProgramSyntaxError(DiftError):
    pass


class UninstrumentedDynamicAccess(DiftError):
    pass


class UnsupportedStackUpdate(DiftError):
    pass


class RuntimeFault(DiftError):
    pass


class MismatchedOrigin(DiftError):
    pass


class ManifestError(DiftError):
    pass
