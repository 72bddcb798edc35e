"""Subject-month data model for three-phase validation studies.

A :class:`Cohort` is stored column-wise: subject-level arrays (phase
indicators, strata) of length ``n1`` and row-level arrays (one row per
subject-month) sorted by subject and month.  Error-prone phase-1 values live
in ``<var>_star`` columns, phase-2 values in ``<var>_tilde`` and validated
phase-3 values in ``<var>_true``; missing cells are ``NaN``.

Outcome ``y`` is binary.  Exposures ``x1`` and ``x2`` are continuous, or
categorical when listed in ``categories`` (values are then integer codes
into the level tuple).  ``x2`` may be absent altogether, in which case every
error-free covariate is carried in the ``x3`` matrix.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    EmptyIntersection,
    InvalidValue,
    MissingColumn,
    MonthGap,
    NonPositiveOffset,
    PhaseInconsistency,
)

logger = logging.getLogger(__name__)

VARIABLES = ("y", "x1", "x2")
PHASES = ("star", "tilde", "true")

_SUBJECT_COLUMNS = ("subject_id", "r1", "r2", "stratum_p2", "stratum_p3")
_REQUIRED = (
    "subject_id", "month", "r1", "r2", "y_star", "x1_star", "y_tilde",
    "x1_tilde", "y_true", "x1_true", "offset", "stratum_p2", "stratum_p3",
)
_X3_PATTERN = re.compile(r"^x3_(\d+)$")


@dataclass(frozen=True)
class MonthlyRecord:
    """One subject-month at every phase of observation."""

    subject_id: object
    month_index: int
    y_star: float
    x1_star: float
    x2_star: float | None = None
    y_tilde: float | None = None
    x1_tilde: float | None = None
    x2_tilde: float | None = None
    y_true: float | None = None
    x1_true: float | None = None
    x2_true: float | None = None
    x3: tuple[float, ...] = ()
    offset: float = 1.0


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: object
    records: tuple[MonthlyRecord, ...]
    r1: int
    r2: int
    stratum_p2: str = ""
    stratum_p3: str = ""

    def __post_init__(self):
        if self.r2 and not self.r1:
            raise PhaseInconsistency(
                f"subject {self.subject_id}: r2 = 1 requires r1 = 1")

    @property
    def r(self) -> int:
        return int(self.r1 and self.r2)


def _present(a: np.ndarray) -> np.ndarray:
    return ~np.isnan(a)


@dataclass(frozen=True, eq=False)
class Cohort:
    """Column-wise cohort of subjects followed monthly.

    ``row_subject`` maps each row to its subject position and must be
    non-decreasing; months must be strictly increasing within a subject.
    Consecutive months are only required after follow-up intersection
    (see :func:`intersect_followup`).
    """

    subject_ids: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    stratum_p2: np.ndarray
    stratum_p3: np.ndarray
    row_subject: np.ndarray
    month: np.ndarray
    offset: np.ndarray
    values: Mapping[str, np.ndarray]
    x3: np.ndarray
    x3_names: tuple[str, ...] = ()
    categories: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        n1 = len(self.subject_ids)
        r1 = np.asarray(self.r1, dtype=bool)
        r2 = np.asarray(self.r2, dtype=bool)
        object.__setattr__(self, "r1", r1)
        object.__setattr__(self, "r2", r2)
        object.__setattr__(self, "row_subject", np.asarray(self.row_subject, dtype=np.int64))
        object.__setattr__(self, "month", np.asarray(self.month, dtype=np.int64))
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float))
        x3 = np.asarray(self.x3, dtype=float)
        if x3.ndim == 1:
            x3 = x3.reshape(-1, 1) if x3.size else x3.reshape(len(self.month), 0)
        object.__setattr__(self, "x3", x3)
        if not self.x3_names:
            object.__setattr__(self, "x3_names",
                               tuple(f"x3_{j + 1}" for j in range(x3.shape[1])))
        for arr in (r1, r2, self.stratum_p2, self.stratum_p3):
            if len(arr) != n1:
                raise InvalidValue("subject-level arrays differ in length")
        n_rows = len(self.month)
        for name, arr in self.values.items():
            if len(arr) != n_rows:
                raise InvalidValue(f"column {name} has {len(arr)} rows, expected {n_rows}")
        if len(self.row_subject) != n_rows or len(self.offset) != n_rows or len(x3) != n_rows:
            raise InvalidValue("row-level arrays differ in length")
        if "y_star" not in self.values or "x1_star" not in self.values:
            raise MissingColumn("y_star and x1_star are required")

        bad = np.flatnonzero(r2 & ~r1)
        if bad.size:
            raise PhaseInconsistency(
                f"r2 = 1 with r1 = 0 for subjects {list(self.subject_ids[bad[:10]])}")
        rs = self.row_subject
        if n_rows and (np.any(np.diff(rs) < 0) or rs[0] < 0 or rs[-1] >= n1):
            raise InvalidValue("rows must be grouped by subject in subject order")
        same = rs[1:] == rs[:-1]
        if np.any(same & (np.diff(self.month) <= 0)):
            raise InvalidValue("months must be strictly increasing within a subject")
        if np.any(~(self.offset > 0)):
            raise NonPositiveOffset(
                f"offset must be positive (rows {np.flatnonzero(~(self.offset > 0))[:10].tolist()})")

        row_r1 = r1[rs]
        row_r2 = r2[rs]
        for var in self.variables:
            for phase, allowed in (("tilde", row_r1), ("true", row_r2)):
                col = self.values.get(f"{var}_{phase}")
                if col is None:
                    continue
                bad = np.flatnonzero(_present(col) & ~allowed)
                if bad.size:
                    flag = "r1" if phase == "tilde" else "r2"
                    raise PhaseInconsistency(
                        f"{var}_{phase} present with {flag} = 0 at rows {bad[:10].tolist()}")
        for phase in PHASES:
            col = self.values.get(f"y_{phase}")
            if col is not None:
                ok = np.isnan(col) | (col == 0) | (col == 1)
                if not ok.all():
                    raise InvalidValue(f"y_{phase} must be 0/1")

    # ------------------------------------------------------------------
    @property
    def n1(self) -> int:
        return len(self.subject_ids)

    @property
    def n2(self) -> int:
        return int(self.r1.sum())

    @property
    def n3(self) -> int:
        return int((self.r1 & self.r2).sum())

    @property
    def n_rows(self) -> int:
        return len(self.month)

    @property
    def r(self) -> np.ndarray:
        return self.r1 & self.r2

    @property
    def variables(self) -> tuple[str, ...]:
        return tuple(v for v in VARIABLES if f"{v}_star" in self.values)

    def kind(self, var: str) -> str:
        if var == "y":
            return "binary"
        return "categorical" if var in self.categories else "continuous"

    def column(self, var: str, phase: str) -> np.ndarray:
        if var in self.x3_names:
            return self.x3[:, self.x3_names.index(var)]
        return self.values[f"{var}_{phase}"]

    @cached_property
    def subject_counts(self) -> np.ndarray:
        return np.bincount(self.row_subject, minlength=self.n1)

    @cached_property
    def subject_starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.subject_counts)[:-1]])

    @cached_property
    def has_prev(self) -> np.ndarray:
        rs = self.row_subject
        out = np.zeros(len(rs), dtype=bool)
        out[1:] = rs[1:] == rs[:-1]
        return out

    @cached_property
    def has_next(self) -> np.ndarray:
        rs = self.row_subject
        out = np.zeros(len(rs), dtype=bool)
        out[:-1] = rs[1:] == rs[:-1]
        return out

    def row_mask(self, subject_mask: np.ndarray) -> np.ndarray:
        return np.asarray(subject_mask, dtype=bool)[self.row_subject]

    def with_values(self, updates: Mapping[str, np.ndarray]) -> "Cohort":
        values = dict(self.values)
        values.update(updates)
        return replace(self, values=values)

    def subset(self, subject_mask: np.ndarray) -> "Cohort":
        """Restrict to the subjects selected by ``subject_mask``."""
        keep = np.asarray(subject_mask, dtype=bool)
        rows = keep[self.row_subject]
        new_index = np.cumsum(keep) - 1
        return Cohort(
            subject_ids=self.subject_ids[keep],
            r1=self.r1[keep],
            r2=self.r2[keep],
            stratum_p2=self.stratum_p2[keep],
            stratum_p3=self.stratum_p3[keep],
            row_subject=new_index[self.row_subject[rows]],
            month=self.month[rows],
            offset=self.offset[rows],
            values={k: v[rows] for k, v in self.values.items()},
            x3=self.x3[rows],
            x3_names=self.x3_names,
            categories=self.categories,
        )

    def phase_covered(self, phase: str) -> np.ndarray:
        """Rows where every variable of ``phase`` is recorded."""
        ok = np.ones(self.n_rows, dtype=bool)
        for var in self.variables:
            col = self.values.get(f"{var}_{phase}")
            ok &= np.zeros(self.n_rows, bool) if col is None else _present(col)
        return ok

    def check_complete(self) -> None:
        """Raise unless every participating phase is recorded on every row."""
        row_r1 = self.r1[self.row_subject]
        row_r2 = self.r2[self.row_subject]
        need = [("star", np.ones(self.n_rows, bool)), ("tilde", row_r1), ("true", row_r2)]
        for phase, rows in need:
            missing = np.flatnonzero(rows & ~self.phase_covered(phase))
            if missing.size:
                raise PhaseInconsistency(
                    f"{phase} values missing on rows {missing[:10].tolist()}; "
                    "run intersect_followup first")
        if np.any(self.subject_counts == 0):
            raise EmptyIntersection("cohort contains subjects without follow-up")

    def equals(self, other: "Cohort") -> bool:
        def same(a, b):
            a = np.asarray(a)
            b = np.asarray(b)
            if a.shape != b.shape:
                return False
            if a.dtype.kind == "f" or b.dtype.kind == "f":
                return bool(np.array_equal(a.astype(float), b.astype(float), equal_nan=True))
            return bool(np.array_equal(a.astype(str), b.astype(str)))

        if set(self.values) != set(other.values):
            return False
        return (
            same(self.subject_ids, other.subject_ids)
            and same(self.r1, other.r1) and same(self.r2, other.r2)
            and same(self.stratum_p2, other.stratum_p2)
            and same(self.stratum_p3, other.stratum_p3)
            and same(self.row_subject, other.row_subject)
            and same(self.month, other.month) and same(self.offset, other.offset)
            and same(self.x3, other.x3)
            and tuple(self.x3_names) == tuple(other.x3_names)
            and {k: tuple(v) for k, v in self.categories.items()}
            == {k: tuple(v) for k, v in other.categories.items()}
            and all(same(self.values[k], other.values[k]) for k in self.values)
        )

    # ------------------------------------------------------------------
    def subject(self, i: int) -> SubjectRecord:
        start = self.subject_starts[i]
        stop = start + self.subject_counts[i]

        def cell(name, row):
            col = self.values.get(name)
            if col is None or np.isnan(col[row]):
                return None
            return float(col[row])

        records = tuple(
            MonthlyRecord(
                subject_id=self.subject_ids[i],
                month_index=int(self.month[row]),
                y_star=cell("y_star", row),
                x1_star=cell("x1_star", row),
                x2_star=cell("x2_star", row),
                y_tilde=cell("y_tilde", row),
                x1_tilde=cell("x1_tilde", row),
                x2_tilde=cell("x2_tilde", row),
                y_true=cell("y_true", row),
                x1_true=cell("x1_true", row),
                x2_true=cell("x2_true", row),
                x3=tuple(float(v) for v in self.x3[row]),
                offset=float(self.offset[row]),
            )
            for row in range(start, stop)
        )
        return SubjectRecord(self.subject_ids[i], records, int(self.r1[i]), int(self.r2[i]),
                             str(self.stratum_p2[i]), str(self.stratum_p3[i]))

    def subjects(self) -> Iterable[SubjectRecord]:
        for i in range(self.n1):
            yield self.subject(i)

    @classmethod
    def from_subjects(cls, subjects: Sequence[SubjectRecord],
                      categories: Mapping[str, Sequence[str]] | None = None,
                      x3_names: Sequence[str] = ()) -> "Cohort":
        rows = [(i, rec) for i, s in enumerate(subjects) for rec in s.records]
        has_x2 = any(rec.x2_star is not None for _, rec in rows)
        names = [f"{v}_{p}" for v in (("y", "x1", "x2") if has_x2 else ("y", "x1"))
                 for p in PHASES]
        nan = float("nan")
        values = {
            n: np.array([nan if getattr(rec, n) is None else getattr(rec, n)
                         for _, rec in rows], dtype=float)
            for n in names
        }
        k = len(rows[0][1].x3) if rows else 0
        return cls(
            subject_ids=np.array([s.subject_id for s in subjects], dtype=object),
            r1=np.array([s.r1 for s in subjects], dtype=bool),
            r2=np.array([s.r2 for s in subjects], dtype=bool),
            stratum_p2=np.array([s.stratum_p2 for s in subjects], dtype=object),
            stratum_p3=np.array([s.stratum_p3 for s in subjects], dtype=object),
            row_subject=np.array([i for i, _ in rows], dtype=np.int64),
            month=np.array([rec.month_index for _, rec in rows], dtype=np.int64),
            offset=np.array([rec.offset for _, rec in rows], dtype=float),
            values=values,
            x3=np.array([rec.x3 for _, rec in rows], dtype=float).reshape(len(rows), k),
            x3_names=tuple(x3_names),
            categories={k: tuple(v) for k, v in (categories or {}).items()},
        )


# ----------------------------------------------------------------------
# Follow-up handling


def intersect_followup(cohort: Cohort) -> Cohort:
    """Trim each subject to the months recorded in every phase it takes part in.

    Subjects left without any month are dropped and logged.
    """
    row_r1 = cohort.r1[cohort.row_subject]
    row_r2 = cohort.r2[cohort.row_subject]
    keep = cohort.phase_covered("star")
    keep &= ~row_r1 | cohort.phase_covered("tilde")
    keep &= ~row_r2 | cohort.phase_covered("true")
    if keep.all():
        return cohort

    kept_per_subject = np.bincount(cohort.row_subject[keep], minlength=cohort.n1)
    dropped = kept_per_subject == 0
    if dropped.any():
        ids = list(cohort.subject_ids[dropped])
        logger.warning("dropping %d subject(s) with empty follow-up intersection: %s",
                       len(ids), ids[:20])
    if dropped.all():
        raise EmptyIntersection("no subject has a non-empty follow-up intersection")

    values = {name: col[keep] for name, col in cohort.values.items()}
    trimmed = Cohort(
        subject_ids=cohort.subject_ids,
        r1=cohort.r1,
        r2=cohort.r2,
        stratum_p2=cohort.stratum_p2,
        stratum_p3=cohort.stratum_p3,
        row_subject=cohort.row_subject[keep],
        month=cohort.month[keep],
        offset=cohort.offset[keep],
        values=values,
        x3=cohort.x3[keep],
        x3_names=cohort.x3_names,
        categories=cohort.categories,
    )
    return trimmed.subset(~dropped) if dropped.any() else trimmed


def check_consecutive(cohort: Cohort) -> None:
    """Raise :class:`MonthGap` when any subject skips a month."""
    same = cohort.row_subject[1:] == cohort.row_subject[:-1]
    jump = np.diff(cohort.month)
    bad = np.flatnonzero(same & (jump != 1))
    if bad.size:
        msgs = []
        for b in bad[:10]:
            sid = cohort.subject_ids[cohort.row_subject[b]]
            missing = list(range(int(cohort.month[b]) + 1, int(cohort.month[b + 1])))
            msgs.append(f"subject {sid}: missing month(s) {missing}")
        raise MonthGap("; ".join(msgs))


# ----------------------------------------------------------------------
# Delimited text I/O


def _read_header_block(text: str) -> tuple[dict, int, str]:
    meta: dict = {}
    lines = text.splitlines(keepends=True)
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        body = lines[i][1:].strip()
        if ":" in body:
            key, _, payload = body.partition(":")
            payload = payload.strip()
            try:
                meta[key.strip()] = json.loads(payload)
            except json.JSONDecodeError:
                meta[key.strip()] = payload
        i += 1
    return meta, i, "".join(lines[i:])


def ingest(path: str | os.PathLike, schema: Mapping[str, str] | None = None,
           *, intersect: bool = True) -> Cohort:
    """Read a long-format file into a :class:`Cohort`.

    ``schema`` maps canonical column names to the names used in the file.
    A comment block before the header may carry
    ``# categories: {"x1": ["efv", "nvp", ...]}``; categorical cells hold
    integer codes into those level lists.
    """
    text = Path(path).read_text(encoding="utf-8")
    meta, n_comment, body = _read_header_block(text)
    reader = csv.reader(io.StringIO(body))
    try:
        header = next(reader)
    except StopIteration:
        raise MissingColumn(f"{path}: empty file") from None
    schema = dict(schema or {})
    file_to_canon = {h: h for h in header}
    file_to_canon.update({f: c for c, f in schema.items()})
    canon = [file_to_canon.get(h, h) for h in header]
    missing = [c for c in _REQUIRED if c not in canon]
    if missing:
        raise MissingColumn(f"{path}: missing required column(s) {missing}")
    has_x2 = "x2_star" in canon
    if has_x2:
        lacking = [c for c in ("x2_tilde", "x2_true") if c not in canon]
        if lacking:
            raise MissingColumn(f"{path}: x2_star present but {lacking} missing")
    x3_cols = sorted((c for c in canon if _X3_PATTERN.match(c)),
                     key=lambda c: int(_X3_PATTERN.match(c).group(1)))
    index = {c: j for j, c in enumerate(canon)}

    rows = list(reader)
    first_line = n_comment + 2  # 1-based line number of the first data row
    categories = {k: tuple(v) for k, v in (meta.get("categories") or {}).items()}
    variables = ("y", "x1", "x2") if has_x2 else ("y", "x1")

    def column(name, kind):
        j = index[name]
        out = np.empty(len(rows), dtype=float)
        for r, row in enumerate(rows):
            cell = row[j].strip() if j < len(row) else ""
            if cell == "":
                out[r] = np.nan
                continue
            try:
                out[r] = float(cell)
            except ValueError:
                raise InvalidValue(
                    f"line {first_line + r}: column {name} has non-numeric value {cell!r}") from None
        if kind == "binary":
            bad = np.flatnonzero(~(np.isnan(out) | (out == 0) | (out == 1)))
            if bad.size:
                raise InvalidValue(
                    f"column {name} must contain only 0/1/blank "
                    f"(lines {[int(first_line + b) for b in bad[:10]]})")
        return out

    def text_column(name):
        j = index[name]
        return np.array([row[j].strip() if j < len(row) else "" for row in rows], dtype=object)

    sid = text_column("subject_id")
    month = column("month", "int")
    r1 = column("r1", "binary")
    r2 = column("r2", "binary")
    for name, col in (("month", month), ("r1", r1), ("r2", r2)):
        if np.isnan(col).any():
            raise InvalidValue(f"column {name} may not be blank")
    offset = column("offset", "real")
    bad = np.flatnonzero(~(offset > 0))
    if bad.size:
        raise NonPositiveOffset(
            f"offset must be positive (lines {[int(first_line + b) for b in bad[:10]]})")
    values = {}
    for var in variables:
        for phase in PHASES:
            name = f"{var}_{phase}"
            values[name] = column(name, "binary" if var == "y" else "real")
            if var in categories:
                col = values[name]
                ok = np.isnan(col) | ((col >= 0) & (col < len(categories[var])) & (col == np.round(col)))
                if not ok.all():
                    bad = np.flatnonzero(~ok)
                    raise InvalidValue(
                        f"{name}: codes outside the category dictionary "
                        f"(lines {[int(first_line + b) for b in bad[:10]]})")
    x3 = np.column_stack([column(c, "real") for c in x3_cols]) if x3_cols else np.zeros((len(rows), 0))

    # phase consistency, reported by line number
    for var in variables:
        for phase, flag, name in (("tilde", r1, "r1"), ("true", r2, "r2")):
            bad = np.flatnonzero(~np.isnan(values[f"{var}_{phase}"]) & (flag == 0))
            if bad.size:
                raise PhaseInconsistency(
                    f"{var}_{phase} present with {name} = 0 on line(s) "
                    f"{[int(first_line + b) for b in bad[:10]]}")
    bad = np.flatnonzero((r2 == 1) & (r1 == 0))
    if bad.size:
        raise PhaseInconsistency(
            f"r2 = 1 with r1 = 0 on line(s) {[int(first_line + b) for b in bad[:10]]}")

    # group rows by subject in order of first appearance, then by month
    subject_ids, first_pos, inverse = np.unique(sid.astype(str), return_index=True,
                                                return_inverse=True)
    order_of_subject = np.argsort(first_pos, kind="stable")
    rank = np.empty_like(order_of_subject)
    rank[order_of_subject] = np.arange(len(order_of_subject))
    row_subject = rank[inverse]
    order = np.lexsort((month, row_subject))
    row_subject = row_subject[order]
    month = month[order]
    dup = np.flatnonzero((row_subject[1:] == row_subject[:-1]) & (month[1:] == month[:-1]))
    if dup.size:
        raise InvalidValue(
            f"duplicate subject-month rows (lines {[int(first_line + order[d + 1]) for d in dup[:10]]})")

    stratum_p2 = text_column("stratum_p2")[order]
    stratum_p3 = text_column("stratum_p3")[order]
    r1 = r1[order]
    r2 = r2[order]
    n1 = len(subject_ids)
    first = np.zeros(n1, dtype=np.int64)
    first[row_subject[::-1]] = np.arange(len(row_subject))[::-1]
    subj = {}
    for name, arr in (("r1", r1), ("r2", r2), ("stratum_p2", stratum_p2),
                      ("stratum_p3", stratum_p3)):
        ref = arr[first]
        varies = np.flatnonzero(arr != ref[row_subject])
        if varies.size:
            raise InvalidValue(
                f"{name} varies within subject {sid[order][varies[0]]}")
        subj[name] = ref

    cohort = Cohort(
        subject_ids=sid[order][first],
        r1=subj["r1"].astype(bool),
        r2=subj["r2"].astype(bool),
        stratum_p2=subj["stratum_p2"],
        stratum_p3=subj["stratum_p3"],
        row_subject=row_subject,
        month=month.astype(np.int64),
        offset=offset[order],
        values={k: v[order] for k, v in values.items()},
        x3=x3[order],
        x3_names=tuple(x3_cols),
        categories=categories,
    )
    if intersect:
        cohort = intersect_followup(cohort)
    check_consecutive(cohort)
    return cohort


def _fmt(v: float) -> str:
    if np.isnan(v):
        return ""
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def export(cohort: Cohort, path: str | os.PathLike,
           extra_columns: Mapping[str, np.ndarray] | None = None) -> None:
    """Write ``cohort`` in the long delimited format read by :func:`ingest`."""
    columns = ["subject_id", "month", "r1", "r2"]
    names = [f"{v}_{p}" for v in cohort.variables for p in PHASES]
    columns += names + list(cohort.x3_names) + ["offset", "stratum_p2", "stratum_p3"]
    extra = dict(extra_columns or {})
    columns += list(extra)
    rs = cohort.row_subject
    buf = io.StringIO()
    if cohort.categories:
        buf.write("# categories: " + json.dumps({k: list(v) for k, v in cohort.categories.items()}) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    vals = [cohort.values.get(n, np.full(cohort.n_rows, np.nan)) for n in names]
    for row in range(cohort.n_rows):
        i = rs[row]
        out = [str(cohort.subject_ids[i]), str(cohort.month[row]),
               str(int(cohort.r1[i])), str(int(cohort.r2[i]))]
        out += [_fmt(v[row]) for v in vals]
        out += [_fmt(v) for v in cohort.x3[row]]
        out += [_fmt(cohort.offset[row]), str(cohort.stratum_p2[i]), str(cohort.stratum_p3[i])]
        out += [str(extra[c][row]) for c in extra]
        writer.writerow(out)
    _atomic_write(path, buf.getvalue())


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
