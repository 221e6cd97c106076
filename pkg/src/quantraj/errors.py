"""Exception hierarchy shared by all quantraj modules."""


class QuantrajError(Exception):
    """Base class for every error raised by the engine."""


class AllNodes(QuantrajError):
    """The field vanishes identically; no phase can be defined."""


class GridMismatch(QuantrajError):
    pass


class InsufficientHistory(QuantrajError):
    """Fewer snapshots than a time-difference stencil needs."""


class SolverDiverged(QuantrajError):
    pass


class UndefinedRegion(QuantrajError):
    """A sampling stencil touches a cell outside the defined mask."""


class SeedUndefined(QuantrajError):
    pass


class NodeCrossing(QuantrajError):
    """A trajectory reached a point where the amplitude is (nearly) zero."""


class ParseError(QuantrajError):
    pass


class ValidationError(QuantrajError):
    """A scenario violates a documented rule; ``rule`` names it."""

    def __init__(self, rule, message):
        super().__init__(f"{rule}: {message}")
        self.rule = rule
