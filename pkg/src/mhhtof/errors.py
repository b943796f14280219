"""Exception types shared across the package."""


class MhhtofError(Exception):
    """Base class for all package-specific errors."""


class InvalidInput(MhhtofError, ValueError):
    """A precondition on an operation's arguments was violated."""


class OutOfDomain(MhhtofError, ValueError):
    """A query point lies outside the domain of the object being queried."""


class Singularity(MhhtofError, ArithmeticError):
    """The Frenet transform is evaluated too close to its curvature singularity."""


class SingularSystem(MhhtofError, ArithmeticError):
    """A boundary-value linear system is numerically singular."""


class DegenerateGeometry(MhhtofError, ValueError):
    """Geometric inputs coincide where a direction or distance is required."""


class ShapeError(MhhtofError, ValueError):
    """Array dimensions do not match the declared layer or sequence shapes."""


class NoFeasiblePlan(MhhtofError, RuntimeError):
    """Every candidate in the cluster failed feasibility screening."""


class ProtocolError(MhhtofError, RuntimeError):
    """An episode was driven outside its legal state machine (e.g. step after done)."""


class ScenarioValidationError(MhhtofError, ValueError):
    """A scenario file failed schema or value validation.

    ``field`` names the offending field path, e.g. ``"goal.deadline"``.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class CorruptCheckpoint(MhhtofError, RuntimeError):
    """A checkpoint blob does not match its manifest."""
