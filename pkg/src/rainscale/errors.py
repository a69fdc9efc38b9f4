"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`RainscaleError`. Subclasses also derive from the closest builtin so
callers that only know about ``ValueError``/``OSError`` still catch them.
The CLI maps the classes onto exit codes through :attr:`exit_code`.
"""


class RainscaleError(Exception):
    exit_code = 2


# configuration / validation (exit 2)


class InvalidConfig(RainscaleError, ValueError):
    pass


class InvalidSpec(RainscaleError, ValueError):
    pass


class SpecMismatch(RainscaleError, ValueError):
    pass


class ShapeMismatch(RainscaleError, ValueError):
    pass


class MissingVariable(RainscaleError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class UnknownVariable(RainscaleError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class NonFiniteValue(RainscaleError, ValueError):
    """A non-finite value in an input array; ``location`` holds its index."""

    def __init__(self, message, path=None, location=None):
        super().__init__(message)
        self.path = path
        self.location = location


class NegativeInput(RainscaleError, ValueError):
    pass


NegativeValue = NegativeInput


class NonDivisibleShape(RainscaleError, ValueError):
    pass


class InvalidTarget(RainscaleError, ValueError):
    pass


class EmptyPartition(RainscaleError, ValueError):
    def __init__(self, partition):
        super().__init__(f"empty partition: {partition}")
        self.partition = partition


class LengthMismatch(RainscaleError, ValueError):
    pass


class EmptySeries(RainscaleError, ValueError):
    pass


class BinningMismatch(RainscaleError, ValueError):
    pass


class ZeroVariance(RainscaleError, ValueError):
    pass


class TooFewSteps(RainscaleError, ValueError):
    pass


class EmptyEvent(RainscaleError, ValueError):
    pass


class TimeMisalignment(RainscaleError, ValueError):
    pass


# autograd misuse


class NonScalarLoss(RainscaleError, ValueError):
    pass


class DoubleBackward(RainscaleError, RuntimeError):
    pass


class NonFiniteTensor(RainscaleError, FloatingPointError):
    exit_code = 4


# I/O (exit 3)


class IoFailure(RainscaleError, OSError):
    exit_code = 3


# numerics (exit 4)


class DivergenceDetected(RainscaleError, FloatingPointError):
    exit_code = 4
