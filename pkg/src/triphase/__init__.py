"""Estimators for three-phase validation studies.

Inverse probability weighting, two- and three-phase generalized raking,
sequential multiple imputation and raking with multiply imputed auxiliaries,
plus a Monte Carlo harness comparing them on synthetic cohorts.
"""

from .calibration import CalibratedWeights, Distance, calibrate, three_phase_calibrate
from .data import Cohort, MonthlyRecord, SubjectRecord, export, ingest, intersect_followup
from .design import ThreePhaseDesign, from_stratified_counts
from .errors import *  # noqa: F401,F403
from .estimators import (
    EstimateReport,
    ipw,
    raking_with_mi,
    three_phase_raking,
    two_phase_raking,
)
from .glm import FitResult, ModelSpec, fit, influence, sandwich
from .mi import ImputationModelSet, ImputedCohort, fit_stage, impute_once, mi_estimate
from .simulation import MetricsTable, SimConfig, generate_cohort, run_monte_carlo, sample_phases

__version__ = "0.1.0"
