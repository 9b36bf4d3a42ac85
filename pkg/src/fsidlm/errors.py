"""Exception types raised across the solver."""


class FsiError(Exception):
    """Base class for all solver errors."""


class PointOutsideDomain(FsiError):
    pass


class NoConvergence(FsiError):
    pass


class ClippingDegenerate(FsiError):
    pass


class UnknownRule(FsiError):
    pass


class UnknownBoundarySet(FsiError):
    pass


class MeshMismatch(FsiError):
    pass


class NonFiniteValue(FsiError):
    pass


class SingularBlock(FsiError):
    pass


class FactorizationStale(FsiError):
    pass


class MaxIterations(FsiError):
    """GMRES hit its iteration cap; ``x`` holds the last iterate."""

    def __init__(self, msg, x=None, iterations=0, residual=float("nan")):
        super().__init__(msg)
        self.x = x
        self.iterations = iterations
        self.residual = residual


class Breakdown(FsiError):
    pass


class NewtonDiverged(FsiError):
    pass


class ElementInversion(FsiError):
    pass


class NegativeElementArea(FsiError):
    def __init__(self, msg, elements=()):
        super().__init__(msg)
        self.elements = list(elements)


class ConfigError(FsiError):
    """Collects every validation problem found in a configuration."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{path}: {reason}" for path, reason in self.errors))
