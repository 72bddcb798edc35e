"""Exception hierarchy.

Every error carries an ``exit_code`` so the command-line front end can map
failures onto its documented exit statuses (2 config, 3 data, 4 numeric).
"""


class TriphaseError(Exception):
    exit_code = 1


class ConfigError(TriphaseError):
    exit_code = 2


class DataError(TriphaseError):
    exit_code = 3


class MissingColumn(DataError):
    pass


class InvalidValue(DataError):
    pass


class PhaseInconsistency(DataError):
    pass


class NonPositiveOffset(DataError):
    pass


class MonthGap(DataError):
    pass


class EmptyIntersection(DataError):
    pass


class SchemaError(DataError):
    pass


class ZeroSamplingProbability(DataError):
    pass


class ImputationSetMismatch(DataError):
    pass


class SparseCategory(DataError):
    pass


class NumericError(TriphaseError):
    exit_code = 4


class RankDeficient(NumericError):
    def __init__(self, message, aliased=()):
        super().__init__(message)
        self.aliased = tuple(aliased)


class NonConvergence(NumericError):
    pass


class Separation(NumericError):
    pass


class NotConverged(NumericError):
    pass


class SingularBread(NumericError):
    pass


class CollinearAuxiliaries(NumericError):
    pass


class NoFeasibleWeights(NumericError):
    pass


class NegativeWeightWarning(UserWarning):
    """Chi-square calibration produced at least one negative weight."""


class DegenerateMeatWarning(UserWarning):
    """Sandwich meat is identically zero (a single unit or no variation)."""


class StratumExhausted(UserWarning):
    """A stratum had fewer units than requested and was taken whole."""
