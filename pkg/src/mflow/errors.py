"""Exception types raised across the package.

Every error derives from :class:`MFlowError` so the CLI can map library
failures to exit code 2 and argument problems to exit code 1.
"""


class MFlowError(Exception):
    pass


class InvalidParams(MFlowError, ValueError):
    pass


class DegenerateRadius(MFlowError, ValueError):
    pass


class OutOfCanvas(MFlowError, ValueError):
    pass


class EmptyFluid(MFlowError, ValueError):
    pass


class DisconnectedFluid(MFlowError, ValueError):
    pass


class ExhaustedRetries(MFlowError, RuntimeError):
    pass


class NotConverged(MFlowError, RuntimeError):
    pass


class NoThroughPath(MFlowError, ValueError):
    pass


class UnstableTimestep(MFlowError, RuntimeError):
    pass


class ShapeMismatch(MFlowError, ValueError):
    pass


class CheckerboardRisk(MFlowError, ValueError):
    pass


class NotScalar(MFlowError, ValueError):
    pass


class InvalidSpec(MFlowError, ValueError):
    pass


class CorruptCheckpoint(MFlowError, ValueError):
    pass


class CorruptContainer(MFlowError, ValueError):
    pass


class TooFewSamples(MFlowError, ValueError):
    pass


class NonFiniteLoss(MFlowError, RuntimeError):
    pass


class ZeroReference(MFlowError, ValueError):
    pass


class NonFiniteValues(MFlowError, ValueError):
    pass


class IoFailure(MFlowError, OSError):
    pass
