"""Three-phase sampling design: selection probabilities and design weights."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import Cohort
from .errors import InvalidValue, MissingColumn, ZeroSamplingProbability


@dataclass(frozen=True, eq=False)
class ThreePhaseDesign:
    """Per-subject selection probabilities.

    ``pi1`` is the probability of entering phase 2, ``pi2`` the probability
    of entering phase 3 given phase 2 (``NaN`` for subjects with r1 = 0).
    ``scale`` multiplies every design weight; it exists so invariance to
    global weight rescaling can be exercised and is 1 otherwise.
    """

    pi1: np.ndarray
    pi2: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    stratum_p2: np.ndarray
    stratum_p3: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        pi1 = np.asarray(self.pi1, float)
        pi2 = np.asarray(self.pi2, float)
        r1 = np.asarray(self.r1, bool)
        if np.any(~((pi1 > 0) & (pi1 <= 1))):
            raise InvalidValue("pi1 must lie in (0, 1] for every subject")
        if np.any(~((pi2[r1] > 0) & (pi2[r1] <= 1))):
            raise InvalidValue("pi2 must lie in (0, 1] for every subject with r1 = 1")
        if not self.scale > 0:
            raise InvalidValue("weight scale must be positive")
        object.__setattr__(self, "pi1", pi1)
        object.__setattr__(self, "pi2", np.where(r1, pi2, np.nan))
        object.__setattr__(self, "r1", r1)
        object.__setattr__(self, "r2", np.asarray(self.r2, bool))

    @property
    def d1(self) -> np.ndarray:
        return self.scale / self.pi1

    @property
    def d2(self) -> np.ndarray:
        return self.scale / self.pi2

    @property
    def d(self) -> np.ndarray:
        return self.d1 * self.d2

    @property
    def pi(self) -> np.ndarray:
        return self.pi1 * self.pi2

    @property
    def r(self) -> np.ndarray:
        return self.r1 & self.r2

    def rescaled(self, c: float) -> "ThreePhaseDesign":
        return replace(self, scale=self.scale * c)


def _stratum_probabilities(labels: np.ndarray, selected: np.ndarray, eligible: np.ndarray,
                           phase: str) -> np.ndarray:
    out = np.full(len(labels), np.nan)
    lab = labels[eligible].astype(str)
    sel = selected[eligible]
    uniq, inv = np.unique(lab, return_inverse=True)
    size = np.bincount(inv, minlength=len(uniq))
    taken = np.bincount(inv, weights=sel.astype(float), minlength=len(uniq))
    empty = uniq[taken == 0]
    if empty.size:
        raise ZeroSamplingProbability(
            f"{phase} stratum {list(empty)} has no sampled subjects "
            "(positivity violated)")
    out[eligible] = (taken / size)[inv]
    return out


def from_stratified_counts(cohort: Cohort,
                           overrides: dict | None = None) -> ThreePhaseDesign:
    """Probabilities from realized stratum counts.

    ``pi1`` = (phase-2 sampled in stratum) / (stratum size) over the whole
    cohort; ``pi2`` the analogous fraction among subjects with r1 = 1.
    ``overrides`` maps subject id to ``(pi1, pi2)`` and replaces the counted
    values for those subjects.
    """
    everyone = np.ones(cohort.n1, dtype=bool)
    pi1 = _stratum_probabilities(cohort.stratum_p2, cohort.r1, everyone, "phase-2")
    pi2 = _stratum_probabilities(cohort.stratum_p3, cohort.r2, cohort.r1, "phase-3")
    if overrides:
        index = {str(s): i for i, s in enumerate(cohort.subject_ids)}
        for sid, (p1, p2) in overrides.items():
            i = index.get(str(sid))
            if i is None:
                continue
            pi1[i] = p1
            if cohort.r1[i]:
                pi2[i] = p2
    return ThreePhaseDesign(pi1=pi1, pi2=pi2, r1=cohort.r1, r2=cohort.r2,
                            stratum_p2=cohort.stratum_p2, stratum_p3=cohort.stratum_p3)


def read_probability_overrides(path) -> dict:
    """Read ``subject_id, pi1, pi2`` rows; ``pi2`` may be blank."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"subject_id", "pi1", "pi2"} - set(reader.fieldnames or ())
        if missing:
            raise MissingColumn(f"{path}: missing column(s) {sorted(missing)}")
        out = {}
        for row in reader:
            p2 = row["pi2"].strip()
            out[row["subject_id"].strip()] = (float(row["pi1"]), float(p2) if p2 else np.nan)
    return out
