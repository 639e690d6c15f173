"""Exception hierarchy shared by all modules."""


class NullScatterError(Exception):
    """Base class for all package errors."""


class InputError(NullScatterError):
    """Malformed user input (configs, seeds, dumps)."""


class MetricSignatureError(NullScatterError):
    def __init__(self, message, location=None):
        super().__init__(message if location is None else f"{message} at {list(map(float, location))}")
        self.location = location


class DegenerateVectorError(NullScatterError):
    pass


class SeedNotNull(NullScatterError):
    pass


class IntegratorStall(NullScatterError):
    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


class PossiblyTrapped(NullScatterError):
    """No boundary crossing before s_max."""


class GrazingHit(NullScatterError):
    def __init__(self, message, hit=None):
        super().__init__(message)
        self.hit = hit


class CertificateViolation(NullScatterError):
    pass


class DegenerateFrame(NullScatterError):
    pass


class InsufficientData(NullScatterError):
    pass


class LibraryRequired(NullScatterError):
    pass


class OutsideRange(NullScatterError):
    """Curve does not cross the observation set exactly once."""


class DegenerateCurveFamily(NullScatterError):
    pass


class UnderdeterminedFit(NullScatterError):
    pass


class RadicalDegenerateScreen(NullScatterError):
    pass


class DegenerateBase(NullScatterError):
    pass


class ScheduleError(NullScatterError):
    pass


class ResolutionInsufficient(NullScatterError):
    pass
