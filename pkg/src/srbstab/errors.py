"""Exception types shared across the toolkit."""


class SrbStabError(Exception):
    """Base class for every error raised by this package."""


# maps
class CutPoint(SrbStabError):
    pass


class OutOfDomain(SrbStabError):
    pass


class NonFiniteDerivative(SrbStabError):
    pass


class ConjugacyViolation(SrbStabError):
    pass


class InvalidMap(SrbStabError):
    pass


# bounded variation
class JTooSmall(SrbStabError):
    pass


class CellTooWide(SrbStabError):
    pass


# transfer operators
class DegenerateCell(SrbStabError):
    pass


class NoConvergence(SrbStabError):
    pass


class NoContractingK(SrbStabError):
    pass


# flows
class StepFailure(SrbStabError):
    pass


class NotEquilibrium(SrbStabError):
    pass


class OnStableManifold(SrbStabError):
    pass


class NoReturn(SrbStabError):
    pass


class HitSingularLeaf(SrbStabError):
    pass


class BadParameters(SrbStabError):
    pass


class FoliationAmbiguous(SrbStabError):
    pass


class NotConverged(SrbStabError):
    pass
