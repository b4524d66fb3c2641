"""Exception types raised across the package."""


class DDRLError(Exception):
    """Base class for every error raised by ddrl."""


# env
class IllegalAction(DDRLError, ValueError):
    pass


class SteppedAfterDone(DDRLError, RuntimeError):
    pass


class BatchSizeMismatch(DDRLError, ValueError):
    pass


# policy
class ShapeMismatch(DDRLError, ValueError):
    pass


class AllActionsMasked(DDRLError, ValueError):
    pass


class NonFiniteGradient(DDRLError, ValueError):
    pass


class CorruptPayload(DDRLError, ValueError):
    pass


class ArchMismatch(DDRLError, ValueError):
    pass


# learn
class EmptyTrajectory(DDRLError, ValueError):
    pass


class NonFiniteRatio(DDRLError, ValueError):
    pass


class EmptyBatch(DDRLError, ValueError):
    pass


class InvalidDualClip(DDRLError, ValueError):
    pass


class UnknownState(DDRLError, KeyError):
    pass


# buffer
class EmptyBuffer(DDRLError, LookupError):
    pass


class UnknownId(DDRLError, KeyError):
    pass


class NonPositivePriority(DDRLError, ValueError):
    pass


class UnknownEpisode(DDRLError, KeyError):
    pass


class FinishEmptyEpisode(DDRLError, ValueError):
    pass


# coord
class VersionRegression(DDRLError, ValueError):
    pass


class UnknownPlayer(DDRLError, KeyError):
    pass


class WaitTimeout(DDRLError, TimeoutError):
    pass


class QueueFull(DDRLError):
    pass


class MixedVersions(DDRLError, ValueError):
    pass


class InferenceTimeout(DDRLError, TimeoutError):
    """The inference batcher was shut down before answering."""


class BarrierDeadlock(DDRLError, RuntimeError):
    """A synchronous barrier waited past its timeout for missing actors."""


# league
class UnknownGeneration(DDRLError, KeyError):
    pass


class NoMatches(DDRLError, ValueError):
    pass


class EmptyPool(DDRLError, LookupError):
    pass


class UnknownStrategy(DDRLError, ValueError):
    pass


class EnvPlayerMismatch(DDRLError, ValueError):
    pass


class MissingAgentTag(DDRLError, ValueError):
    pass


# runtime
class ConfigInvalid(DDRLError, ValueError):
    pass


class WorkerCrashed(DDRLError, RuntimeError):
    def __init__(self, message, summary=None):
        super().__init__(message)
        self.summary = summary


class ProtocolError(DDRLError, ValueError):
    pass


class FrameTooLarge(ProtocolError):
    pass


class UnknownWorker(DDRLError, KeyError):
    pass


class HeterogeneousEnvs(DDRLError, ValueError):
    pass
