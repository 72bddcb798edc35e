"""Design matrices for a :class:`~triphase.glm.ModelSpec` on cohort data."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .data import Cohort
from .errors import ConfigError
from .glm import ModelSpec

INTERCEPT = "(Intercept)"


def expand(cohort: Cohort, var: str, phase: str,
           values: Mapping[str, np.ndarray] | None = None,
           rows: np.ndarray | None = None) -> tuple[np.ndarray, list[str]]:
    """Columns for one variable: itself, or treatment dummies if categorical."""
    if values is not None and var in values:
        col = values[var]
    elif var in cohort.x3_names:
        col = cohort.x3[:, cohort.x3_names.index(var)]
    elif var in cohort.variables:
        col = cohort.values[f"{var}_{phase}"]
    else:
        raise ConfigError(f"unknown model term {var!r}")
    if rows is not None:
        col = col[rows]
    if var in cohort.categories:
        levels = cohort.categories[var]
        codes = col
        mats = [(codes == k).astype(float) for k in range(1, len(levels))]
        mat = np.column_stack(mats) if mats else np.zeros((len(col), 0))
        return mat, [f"{var}[{levels[k]}]" for k in range(1, len(levels))]
    return np.asarray(col, float).reshape(-1, 1), [var]


def model_matrix(cohort: Cohort, spec: ModelSpec, phase: str,
                 rows: np.ndarray | None = None,
                 values: Mapping[str, np.ndarray] | None = None):
    """Return ``(X, y, offset, names)`` for ``spec`` evaluated at ``phase``.

    ``values`` overrides variable columns (used for imputed data).
    """
    blocks = []
    names: list[str] = []
    n = cohort.n_rows if rows is None else int(np.count_nonzero(rows)) if rows.dtype == bool else len(rows)
    if spec.intercept:
        blocks.append(np.ones((n, 1)))
        names.append(INTERCEPT)
    for term in spec.predictors:
        parts = term.split(":")
        mat, nm = expand(cohort, parts[0], phase, values, rows)
        for other in parts[1:]:
            m2, n2 = expand(cohort, other, phase, values, rows)
            mat = np.column_stack([mat[:, i] * m2[:, j]
                                   for i in range(mat.shape[1]) for j in range(m2.shape[1])]) \
                if mat.shape[1] and m2.shape[1] else np.zeros((n, 0))
            nm = [f"{a}:{b}" for a in nm for b in n2]
        blocks.append(mat)
        names.extend(nm)
    X = np.column_stack(blocks) if blocks else np.zeros((n, 0))
    y, _ = expand(cohort, spec.response, phase, values, rows)
    offset = None
    if spec.offset_column:
        if spec.offset_column != "offset":
            raise ConfigError("only the 'offset' column can serve as model offset")
        offset = cohort.offset if rows is None else cohort.offset[rows]
    return X, y[:, 0], offset, names
