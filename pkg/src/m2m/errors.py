"""Exception hierarchy.

Every failure that stems from bad input or a violated precondition derives
from :class:`ContractError` (CLI exit code 2). Leakage between training and
test rows raises :class:`LeakageDetected` (CLI exit code 3).
"""


class M2MError(Exception):
    """Base class for all package errors."""


class ContractError(M2MError, ValueError):
    """Input violates an operation's documented preconditions."""


class LeakageDetected(M2MError):
    """A test row was consumed by a training-time fit."""


# data model / loading
class UnknownColumn(ContractError):
    pass


class NonNumericCell(ContractError):
    pass


class DuplicateRowId(ContractError):
    pass


class OrdinalNonInteger(ContractError):
    pass


class UnmatchedId(ContractError):
    pass


class InvalidRate(ContractError):
    pass


class SchemaMismatch(ContractError):
    pass


class ShapeMismatch(ContractError):
    pass


class InvalidConfig(ContractError):
    pass


# preprocessing
class UnmappedProbe(ContractError):
    pass


class DegenerateComponent(ContractError):
    pass


class EmptyGroup(ContractError):
    pass


# imputation / divergence
class AllMissingColumn(ContractError):
    pass


class NoCoObservedFeatures(ContractError):
    pass


class NoMissingCells(ContractError):
    pass


class EmptySample(ContractError):
    pass


class ConstantInput(ContractError):
    pass


class LengthMismatch(ContractError):
    pass


# linear algebra / models
class RankDeficient(ContractError):
    pass


class ZeroVarianceDeflation(ContractError):
    pass


class NonFiniteInput(ContractError):
    pass


class DivergenceDetected(M2MError):
    """Training loss became non-finite."""


class ZeroDenominator(ContractError):
    pass


# explainability
class ConstantPrediction(ContractError):
    pass


class TooManyFeatures(ContractError):
    pass


class MalformedAtlasRow(ContractError):
    pass


# harness
class TestRowIncomplete(ContractError):
    __test__ = False  # not a pytest class


class TooFewCompleteRows(ContractError):
    pass


class EmptyTestSet(ContractError):
    pass
