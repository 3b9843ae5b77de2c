"""Pool formation and covariate aggregation.

Matched sets are randomly partitioned into pools of ``g`` sets. Within a
pool the ``g`` cases form the case row and, for each ``c = 1..m``, the ``g``
c-th controls form the c-th control row. A pooled value is the *sum* of
the members' per-subject term values. Sums rather than means are used so
that pools of two different sizes can share one analysis without
rescaling.
"""
from __future__ import annotations

import csv
import json
import secrets
import warnings
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cohort import Cohort, MatchedSet, Subject, format_real, read_rows
from .engine import ConditionalDesign, FitResult, fit
from .errors import (
    BiasWarning,
    ClrPoolError,
    DisclosureWarning,
    DomainError,
    Infeasible,
    InputError,
    InvalidPoolsize,
    PlanMismatch,
    SparseLabelClass,
)
from .terms import TermSpec, evaluate_term, max_power, parse_terms

COVER_ALL = "cover_all"
DROP_REMAINDER = "drop_remainder"
BIAS_POOLSIZE = 10


def normalize_policy(policy: str) -> str:
    p = policy.replace("-", "_").lower()
    if p not in (COVER_ALL, DROP_REMAINDER):
        raise InputError(f"unknown pooling policy {policy!r}")
    return p


@dataclass(frozen=True)
class Block:
    g: int
    k: int


@dataclass(frozen=True)
class PoolPlan:
    blocks: tuple[Block, ...]
    dropped_sets: int
    policy: str
    m: int | None = None

    @property
    def n_sets(self) -> int:
        return sum(b.g * b.k for b in self.blocks) + self.dropped_sets

    @property
    def primary_g(self) -> int:
        return self.blocks[0].g

    @property
    def n_pools(self) -> int:
        return sum(b.k for b in self.blocks)

    def pool_sizes(self) -> list[int]:
        return [b.g for b in self.blocks for _ in range(b.k)]

    def summary(self) -> str:
        parts = " + ".join(f"{b.k}×{b.g}" for b in self.blocks)
        return f"{parts}, {self.dropped_sets} dropped"

    def to_dict(self) -> dict:
        return {"blocks": [{"g": b.g, "k": b.k} for b in self.blocks],
                "dropped": self.dropped_sets, "policy": self.policy, "m": self.m}


def plan_pools(N: int, g: int, policy: str = COVER_ALL, secondary_min: int = 3,
               m: int | None = None) -> PoolPlan:
    """Poolsize arithmetic for ``N`` matched sets and primary pool size ``g``.

    ``cover_all`` adds one block of smaller pools so that no set is lost.
    Candidate secondary sizes are tried from ``secondary_min`` upwards and,
    for each, the fewest pools that absorb the remainder; so
    ``plan_pools(2389, 5)`` gives 476 pools of 5 plus 3 pools of 3.
    ``drop_remainder`` uses ``N // g`` pools and leaves ``N % g`` sets out.
    """
    policy = normalize_policy(policy)
    if g < 1:
        raise InvalidPoolsize(f"pool size must be >= 1, got {g}")
    if N < g:
        raise Infeasible(f"N={N} matched sets cannot fill a single pool of size {g}")
    if g > BIAS_POOLSIZE:
        warnings.warn(f"pool size {g} > {BIAS_POOLSIZE} tends to bias estimates away from "
                      "the null", BiasWarning, stacklevel=2)
    r = N % g
    if r == 0:
        return PoolPlan((Block(g, N // g),), 0, policy, m)
    if policy == DROP_REMAINDER:
        return PoolPlan((Block(g, N // g),), r, policy, m)
    for g2 in range(max(secondary_min, 1), g):
        for k2 in range(1, g + 1):
            used = k2 * g2
            if used % g == r and N - used >= g:
                return PoolPlan((Block(g, (N - used) // g), Block(g2, k2)), 0, policy, m)
    if secondary_min > g - 1:
        why = f"no secondary pool size g2 with {secondary_min} <= g2 < {g} exists"
    else:
        why = (f"no k2 pools of a single size g2 in [{secondary_min}, {g - 1}] absorb the "
               f"remainder while keeping a pool of size {g}")
    raise Infeasible(f"N={N} = {N // g}×{g} + {r}: {why}")


@dataclass(frozen=True)
class Pool:
    pool_id: int
    members: tuple[str, ...]
    label: str | None = None

    @property
    def g(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class PoolAssignment:
    pools: tuple[Pool, ...]
    seed: int
    plan: PoolPlan
    dropped: tuple[str, ...] = ()
    strata_labels: Mapping[str, str] | None = field(default=None, hash=False)

    def to_dict(self) -> dict:
        d = self.plan.to_dict()
        d.update({
            "dropped": len(self.dropped),
            "dropped_members": list(self.dropped),
            "seed": self.seed,
            "pools": [{"id": p.pool_id, "members": list(p.members),
                       **({"label": p.label} if p.label is not None else {})}
                      for p in self.pools],
        })
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "PoolAssignment":
        plan = PoolPlan(tuple(Block(b["g"], b["k"]) for b in d["blocks"]),
                        int(d["dropped"]), d["policy"], d.get("m"))
        pools = tuple(Pool(int(p["id"]), tuple(p["members"]), p.get("label"))
                      for p in d["pools"])
        labels = {m: p.label for p in pools for m in p.members} if any(
            p.label is not None for p in pools) else None
        return cls(pools, int(d["seed"]), plan, tuple(d.get("dropped_members", ())), labels)


def resolve_seed(seed: int | None) -> int:
    return secrets.randbits(63) if seed is None else int(seed)


def partition(ids: Sequence[str], plan: PoolPlan, rng: np.random.Generator):
    """Uniform random partition of ``ids`` into the plan's pools.

    Returns ``(member tuples in block order, dropped ids)``.
    """
    if len(ids) != plan.n_sets:
        raise PlanMismatch(f"plan covers {plan.n_sets} sets, got {len(ids)}")
    perm = rng.permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    dropped = tuple(shuffled[:plan.dropped_sets])
    pos = plan.dropped_sets
    groups = []
    for size in plan.pool_sizes():
        groups.append(tuple(shuffled[pos:pos + size]))
        pos += size
    return groups, dropped


def assign_pools(cohort: Cohort, plan: PoolPlan, seed: int | None = None,
                 strata_labels: Mapping[str, str] | None = None,
                 secondary_min: int = 3) -> PoolAssignment:
    """Randomly assign the cohort's matched sets to pools.

    With ``strata_labels`` the plan's pool size and policy are applied
    separately within every label class, so each pool is label-homogeneous.
    """
    seed = resolve_seed(seed)
    ratios = cohort.matching_ratios
    if len(ratios) > 1:
        raise PlanMismatch(f"pools can only combine sets of one matching ratio, got {sorted(ratios)}")
    if plan.m is not None and ratios and plan.m not in ratios:
        raise PlanMismatch(f"plan is for 1:{plan.m} matching, cohort is 1:{ratios.pop()}")
    rng = np.random.default_rng(seed)
    ids = [ms.stratum_id for ms in cohort.sets]

    if strata_labels is None:
        if plan.n_sets != cohort.n_sets:
            raise PlanMismatch(f"plan covers {plan.n_sets} sets, cohort has {cohort.n_sets}")
        groups, dropped = partition(ids, plan, rng)
        pools = tuple(Pool(i + 1, members) for i, members in enumerate(groups))
        return PoolAssignment(pools, seed, plan, dropped)

    missing = [s for s in ids if s not in strata_labels]
    if missing:
        raise InputError(f"no label for strata {missing[:5]}")
    classes: "OrderedDict[str, list[str]]" = OrderedDict()
    for s in ids:
        classes.setdefault(str(strata_labels[s]), []).append(s)
    subplans, sparse = {}, []
    for label, members in classes.items():
        if len(members) < secondary_min:
            sparse.append((label, f"class {label!r} has only {len(members)} matched sets "
                                  f"(< {secondary_min})"))
            continue
        try:
            subplans[label] = plan_pools(len(members), plan.primary_g, plan.policy,
                                         secondary_min, plan.m)
        except Infeasible as exc:
            sparse.append((label, f"class {label!r}: {exc}"))
    if sparse:
        raise SparseLabelClass(sparse[0][0], "label classes too sparse to pool: "
                               + "; ".join(msg for _, msg in sparse))
    pools, dropped, blocks = [], [], []
    for label, members in classes.items():
        sub = subplans[label]
        groups, gone = partition(members, sub, rng)
        for grp in groups:
            pools.append(Pool(len(pools) + 1, grp, label))
        dropped.extend(gone)
        blocks.extend(sub.blocks)
    merged: "OrderedDict[int, int]" = OrderedDict()
    for b in blocks:
        merged[b.g] = merged.get(b.g, 0) + b.k
    full_plan = PoolPlan(tuple(Block(g, k) for g, k in merged.items()), len(dropped),
                         plan.policy, plan.m)
    return PoolAssignment(tuple(pools), seed, full_plan, tuple(dropped),
                          {s: str(strata_labels[s]) for s in ids})


class PooledDesign(ConditionalDesign):
    """A conditional design whose strata are pools.

    Row 0 of each pool is the summed case arm; row ``c`` is the summed
    c-th control arm.
    """

    def __init__(self, X, offsets, term_names, pool_ids, pool_sizes=None):
        super().__init__(X, offsets, term_names, [str(p) for p in pool_ids])
        self.pool_sizes = tuple(pool_sizes) if pool_sizes is not None else None

    def to_csv(self, path) -> None:
        write_pooled_csv(self, path)


def check_disclosure(min_g: int, terms: Sequence[TermSpec]) -> None:
    worst = max((max_power(t) for t in terms), default=1)
    if min_g <= worst:
        warnings.warn(
            f"pools of size {min_g} with terms up to power {worst}: member covariate values "
            "can be recovered algebraically from the pooled sums", DisclosureWarning, stacklevel=3)


def _locate_domain_error(cohort: Cohort, terms):
    for ms in cohort.sets:
        for s in ms.subjects:
            for t in terms:
                try:
                    evaluate_term(s, t)
                except DomainError as exc:
                    return DomainError(f"{exc} (node {s.node_id}, stratum {s.stratum_id})")
    return None


def subject_tensor(cohort: Cohort, terms: Sequence[TermSpec]) -> np.ndarray:
    """Term values per subject, ``(N, m + 1, p)``, with subject ids redacted from errors."""
    try:
        return cohort.term_tensor(terms)
    except DomainError:
        located = _locate_domain_error(cohort, terms)
        raise (located or DomainError("transformation outside its domain")) from None


def aggregate_tensor(T: np.ndarray, index: Mapping[str, int], assignment: PoolAssignment,
                     term_names: Sequence[str]) -> PooledDesign:
    width = T.shape[1]
    blocks = np.empty((len(assignment.pools), width, T.shape[2]))
    for i, pool in enumerate(assignment.pools):
        rows = [index[s] for s in pool.members]
        blocks[i] = T[rows].sum(axis=0)
    n = len(assignment.pools)
    return PooledDesign(blocks.reshape(n * width, -1), np.arange(n + 1) * width, term_names,
                        [p.pool_id for p in assignment.pools], [p.g for p in assignment.pools])


def aggregate(cohort: Cohort, assignment: PoolAssignment, terms) -> PooledDesign:
    """Sum per-subject term values over each pool and arm.

    Terms are evaluated per subject before summing, so ``log(age)`` pools
    as the sum of logs, never the log of a sum.
    """
    terms = parse_terms(terms)
    index = {ms.stratum_id: i for i, ms in enumerate(cohort.sets)}
    unknown = [s for p in assignment.pools for s in p.members if s not in index]
    if unknown:
        raise PlanMismatch(f"assignment references unknown strata {unknown[:5]}")
    if assignment.pools:
        check_disclosure(min(p.g for p in assignment.pools), terms)
    T = subject_tensor(cohort, terms)
    return aggregate_tensor(T, index, assignment, [t.render() for t in terms])


def unpooled_design(cohort: Cohort, terms) -> ConditionalDesign:
    """Individual-level design; handles mixed matching ratios."""
    terms = parse_terms(terms)
    names = [t.render() for t in terms]
    strata = []
    try:
        for ms in cohort.sets:
            rows = [{"arm": "case" if s.outcome else "control",
                     "x": [evaluate_term(s, t) for t in terms]} for s in ms.ordered()]
            strata.append({"stratum_key": ms.stratum_id, "rows": rows})
    except DomainError:
        raise _locate_domain_error(cohort, terms) from None
    return ConditionalDesign.from_strata(strata, names)


@dataclass
class RepeatResult:
    seed: int
    fit: FitResult | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.fit is not None


def repeat_pooling(cohort: Cohort, plan: PoolPlan, terms, R: int, base_seed: int,
                   strata_labels=None, workers: int = 1, **fit_opts) -> list[RepeatResult]:
    """Re-form pools ``R`` times (seeds ``base_seed + 1 .. base_seed + R``) and refit.

    Failed fits are reported per repeat instead of aborting the batch;
    output order follows the seeds whatever the completion order.
    """
    if R < 1:
        raise InputError("R must be >= 1")
    terms = parse_terms(terms)
    names = [t.render() for t in terms]
    T = subject_tensor(cohort, terms)
    index = {ms.stratum_id: i for i, ms in enumerate(cohort.sets)}
    if plan.n_pools:
        check_disclosure(min(plan.pool_sizes()), terms)

    def one(seed):
        try:
            a = assign_pools(cohort, plan, seed, strata_labels)
            return RepeatResult(seed, fit(aggregate_tensor(T, index, a, names), **fit_opts))
        except ClrPoolError as exc:
            return RepeatResult(seed, None, f"{type(exc).__name__}: {exc}")

    seeds = [base_seed + r for r in range(1, R + 1)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(one, seeds))
    return [one(s) for s in seeds]


def bootstrap_strata(cohort: Cohort, n_sets: int, seed: int) -> Cohort:
    """Resample whole matched sets with replacement into a cohort of ``n_sets``."""
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, cohort.n_sets, size=n_sets)
    sets = []
    for i, j in enumerate(picks):
        src = cohort.sets[j]
        sid = f"b{i + 1}"
        subjects = tuple(Subject(f"{sid}.{k}", sid, s.node_id, s.outcome, dict(s.covariates))
                         for k, s in enumerate(src.subjects))
        sets.append(MatchedSet(sid, subjects))
    return Cohort(tuple(sets), cohort.covariate_names)


# --- pooled CSV --------------------------------------------------------------

POOLED_NODE = "pooled"


def write_pooled_csv(d: ConditionalDesign, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pool_id", "node_id", "subject_id", "outcome", *d.term_names])
        for i, key in enumerate(d.stratum_keys):
            for slot, r in enumerate(range(d.offsets[i], d.offsets[i + 1])):
                w.writerow([key, POOLED_NODE, f"{key}.{slot}", 1 if slot == 0 else 0,
                            *(format_real(v) for v in d.X[r])])


def read_pooled_csv(path, term_names: Sequence[str] | None = None) -> PooledDesign:
    rows, header = read_rows(path)
    if "pool_id" not in header:
        raise InputError(f"{path}: not a pooled design (no pool_id column)")
    available = [h for h in header if h not in ("pool_id", "node_id", "subject_id", "outcome")]
    names = list(term_names) if term_names is not None else available
    missing = [n for n in names if n not in available]
    if missing:
        raise InputError(f"{path}: pooled columns {missing} not present (have {available})")
    grouped: "OrderedDict[str, list]" = OrderedDict()
    for row in rows:
        grouped.setdefault(row["pool_id"], []).append(row)
    X, offsets = [], [0]
    for key, members in grouped.items():
        cases = [r for r in members if r["outcome"].strip() == "1"]
        controls = [r for r in members if r["outcome"].strip() == "0"]
        if len(cases) != 1 or not controls:
            raise InputError(f"pool {key}: needs one case row and >= 1 control row")
        for r in cases + controls:
            try:
                X.append([float(r[n]) for n in names])
            except ValueError:
                raise InputError(f"pool {key}: non-numeric value") from None
        offsets.append(offsets[-1] + len(members))
    return PooledDesign(np.array(X, dtype=float).reshape(-1, len(names)), offsets, names,
                        list(grouped))
