"""Matched case-control microdata: subjects, matched sets and cohorts.

Cohort CSV schema (header required)::

    stratum_id,node_id,subject_id,outcome,<covariate...>

``outcome`` is 1 for the case and 0 for controls; every covariate column is
parsed as a decimal real. Categorical covariates must already be 0/1
indicator columns and derived indices (BMI and the like) precomputed.
"""
from __future__ import annotations

import csv
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    CohortError,
    DuplicateSubject,
    EmptyCohortWarning,
    InputError,
    MissingCovariate,
    NonFiniteValue,
    StratumNodeConflict,
    StratumWithMultipleCases,
    StratumWithoutCase,
)
from .terms import TermSpec, evaluate_columns

ID_COLUMNS = ("stratum_id", "node_id", "subject_id", "outcome")


@dataclass(frozen=True)
class Subject:
    subject_id: str
    stratum_id: str
    node_id: str
    outcome: int
    covariates: Mapping[str, float] = field(hash=False)

    def __post_init__(self):
        if self.outcome not in (0, 1):
            raise InputError(f"subject {self.subject_id}: outcome must be 0 or 1")
        for name, v in self.covariates.items():
            if not math.isfinite(v):
                raise NonFiniteValue(
                    f"subject {self.subject_id}: covariate {name} is not finite",
                    [(self.stratum_id, f"non-finite {name}")],
                )


@dataclass(frozen=True)
class MatchedSet:
    """One case and its ``m`` matched controls.

    ``subjects`` keeps input order; :attr:`controls` is therefore the
    deterministic control ordering used when control pools are formed.
    """

    stratum_id: str
    subjects: tuple[Subject, ...]

    def __post_init__(self):
        n_cases = sum(s.outcome for s in self.subjects)
        if n_cases == 0:
            raise StratumWithoutCase(
                f"stratum {self.stratum_id} has no case", [(self.stratum_id, "no case")]
            )
        if n_cases > 1:
            raise StratumWithMultipleCases(
                f"stratum {self.stratum_id} has {n_cases} cases",
                [(self.stratum_id, f"{n_cases} cases")],
            )
        if len(self.subjects) < 2:
            raise StratumWithoutCase(
                f"stratum {self.stratum_id} has no control",
                [(self.stratum_id, "no control")],
            )
        if any(s.stratum_id != self.stratum_id for s in self.subjects):
            raise InputError(f"stratum {self.stratum_id}: foreign subject")

    @property
    def case(self) -> Subject:
        return next(s for s in self.subjects if s.outcome == 1)

    @property
    def controls(self) -> tuple[Subject, ...]:
        return tuple(s for s in self.subjects if s.outcome == 0)

    @property
    def m(self) -> int:
        return len(self.subjects) - 1

    @property
    def node_id(self) -> str:
        return self.subjects[0].node_id

    def ordered(self) -> tuple[Subject, ...]:
        """Case first, then controls in input order."""
        return (self.case,) + self.controls


@dataclass(frozen=True)
class Cohort:
    sets: tuple[MatchedSet, ...]
    covariate_names: tuple[str, ...]

    def __post_init__(self):
        seen = set()
        for ms in self.sets:
            if ms.stratum_id in seen:
                raise CohortError(f"duplicate stratum id {ms.stratum_id}")
            seen.add(ms.stratum_id)

    @property
    def n_sets(self) -> int:
        return len(self.sets)

    @property
    def matching_ratios(self) -> set[int]:
        return {ms.m for ms in self.sets}

    @property
    def m(self) -> int:
        """The common matching ratio; raises if the cohort mixes ratios."""
        ratios = self.matching_ratios
        if len(ratios) != 1:
            raise InputError(f"cohort mixes matching ratios {sorted(ratios)}")
        return ratios.pop()

    @property
    def node_ids(self) -> list[str]:
        return sorted({ms.node_id for ms in self.sets})

    def by_id(self) -> dict[str, MatchedSet]:
        return {ms.stratum_id: ms for ms in self.sets}

    def subjects(self) -> Iterable[Subject]:
        for ms in self.sets:
            yield from ms.subjects

    def restrict_nodes(self, node_ids) -> "Cohort":
        keep = set(node_ids)
        return Cohort(tuple(ms for ms in self.sets if ms.node_id in keep),
                      self.covariate_names)

    def shard(self, node_id: str) -> "Cohort":
        return self.restrict_nodes([node_id])

    def term_tensor(self, terms: Sequence[TermSpec]) -> np.ndarray:
        """Per-subject term values as an ``(N, m + 1, p)`` array.

        Slot 0 along the second axis is the case; slots ``1..m`` are the
        controls in input order. Requires a uniform matching ratio.
        """
        m = self.m if self.sets else 0
        n = len(self.sets)
        columns = {
            name: np.array([[s.covariates[name] for s in ms.ordered()] for ms in self.sets],
                           dtype=float).reshape(n, m + 1)
            for name in self.covariate_names
        }
        out = np.empty((n, m + 1, len(terms)))
        for j, t in enumerate(terms):
            out[:, :, j] = evaluate_columns(columns, t)
        return out


def _parse_real(raw, stratum_id, name):
    if raw is None or (isinstance(raw, str) and raw.strip() == ""):
        raise MissingCovariate(
            f"stratum {stratum_id}: missing value for {name}",
            [(stratum_id, f"missing {name}")],
        )
    try:
        v = float(raw)
    except (TypeError, ValueError):
        raise InputError(f"stratum {stratum_id}: {name}={raw!r} is not a number") from None
    if not math.isfinite(v):
        raise NonFiniteValue(
            f"stratum {stratum_id}: {name} is not finite", [(stratum_id, f"non-finite {name}")]
        )
    return v


def validate_cohort(raw_rows: Iterable[Mapping[str, object]],
                    covariate_names: Sequence[str] | None = None) -> Cohort:
    """Group raw subject records into a validated :class:`Cohort`.

    Every stratum is checked; the exception raised is the class of the first
    problem found and its ``diagnostics`` list covers all offending strata.
    """
    rows = list(raw_rows)
    if covariate_names is None:
        covariate_names = [k for k in (rows[0].keys() if rows else []) if k not in ID_COLUMNS]
    covariate_names = tuple(covariate_names)

    if not rows:
        warnings.warn("empty cohort: no matched sets", EmptyCohortWarning, stacklevel=2)
        return Cohort((), covariate_names)

    grouped: "OrderedDict[str, list]" = OrderedDict()
    seen_ids = set()
    problems: list[tuple[type, str, str]] = []
    for row in rows:
        stratum = str(row["stratum_id"])
        sid = str(row["subject_id"])
        if sid in seen_ids:
            problems.append((DuplicateSubject, stratum, f"duplicate subject {sid}"))
            continue
        seen_ids.add(sid)
        grouped.setdefault(stratum, []).append(row)

    sets = []
    for stratum, members in grouped.items():
        try:
            subjects = []
            for row in members:
                outcome_raw = str(row["outcome"]).strip()
                if outcome_raw not in ("0", "1", "0.0", "1.0"):
                    raise InputError(f"stratum {stratum}: outcome {outcome_raw!r} not in {{0,1}}")
                covs = {name: _parse_real(row.get(name), stratum, name)
                        for name in covariate_names}
                subjects.append(Subject(str(row["subject_id"]), stratum, str(row["node_id"]),
                                        int(float(outcome_raw)), covs))
            nodes = {s.node_id for s in subjects}
            if len(nodes) > 1:
                raise StratumNodeConflict(
                    f"stratum {stratum} spans nodes {sorted(nodes)}",
                    [(stratum, "spans several nodes")],
                )
            sets.append(MatchedSet(stratum, tuple(subjects)))
        except CohortError as exc:
            problems.extend((type(exc), s, msg) for s, msg in exc.diagnostics or [(stratum, str(exc))])
        except InputError as exc:
            problems.append((InputError, stratum, str(exc)))

    if problems:
        cls = problems[0][0]
        diagnostics = [(s, msg) for _, s, msg in problems]
        summary = "; ".join(f"stratum {s}: {msg}" for s, msg in diagnostics[:10])
        if len(diagnostics) > 10:
            summary += f"; ... ({len(diagnostics)} problems)"
        if issubclass(cls, CohortError):
            raise cls(summary, diagnostics)
        raise CohortError(summary, diagnostics)
    return Cohort(tuple(sets), covariate_names)


# --- CSV -------------------------------------------------------------------

def format_real(x: float) -> str:
    """Shortest text that round-trips ``x`` exactly (integers without ``.0``)."""
    x = float(x)
    if x.is_integer() and abs(x) < 1e16:
        return str(int(x))
    return repr(x)


def read_rows(path) -> tuple[list[dict], list[str]]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise InputError(f"{path}: missing header")
        header = [h.strip() for h in reader.fieldnames]
        reader.fieldnames = header
        rows = list(reader)
    return rows, header


def read_cohort_csv(path) -> Cohort:
    rows, header = read_rows(path)
    missing = [c for c in ID_COLUMNS if c not in header]
    if missing:
        raise InputError(f"{path}: missing required column(s) {', '.join(missing)}")
    return validate_cohort(rows, [h for h in header if h not in ID_COLUMNS])


def write_cohort_csv(cohort: Cohort, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(ID_COLUMNS) + list(cohort.covariate_names))
        for s in cohort.subjects():
            w.writerow([s.stratum_id, s.node_id, s.subject_id, s.outcome]
                       + [format_real(s.covariates[n]) for n in cohort.covariate_names])


def cohort_from_tensor(values: np.ndarray, covariate_names: Sequence[str],
                       node_id: str = "node1", prefix: str = "") -> Cohort:
    """Build a cohort from an ``(N, m + 1, q)`` covariate array, case in slot 0."""
    n, width, _ = values.shape
    sets = []
    for i in range(n):
        stratum = f"{prefix}{i + 1}"
        subjects = tuple(
            Subject(f"{stratum}.{j}", stratum, node_id, 1 if j == 0 else 0,
                    dict(zip(covariate_names, map(float, values[i, j]))))
            for j in range(width)
        )
        sets.append(MatchedSet(stratum, subjects))
    return Cohort(tuple(sets), tuple(covariate_names))
