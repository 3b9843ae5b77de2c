"""Monte Carlo comparison of unpooled and pooled conditional logistic regression.

Each replicate draws ``n_sets`` matched sets of ``1 + m`` subjects:

* ``log U`` and ``Z1`` bivariate standard normal with correlation
  ``z1_logU_corr``; ``U = exp(log U)``,
* ``X ~ Bernoulli(x_prevalence)``, ``Z2 ~ N(0, 1)``,
* linear predictor ``alpha_i + beta U + gamma X + delta Z1 + omega Z2 + theta U Z2``
  with ``alpha_i ~ N(alpha_mean, alpha_sd)``.

The case of each set is drawn from the conditional one-case distribution
(probability proportional to ``exp(eta)``). ``case_mode="bernoulli"`` instead
draws independent outcomes and rejects sets without exactly one case.
"""
from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .cohort import Cohort, cohort_from_tensor
from .engine import ConditionalDesign, fit
from .errors import BiasWarning, ClrPoolError, DisclosureWarning, InputError
from .pooling import DROP_REMAINDER, aggregate_tensor, assign_pools, plan_pools, subject_tensor
from .terms import parse_terms

COVARIATES = ("U", "X", "Z1", "Z2")
TERMS = ("U", "X", "Z1", "Z2", "U:Z2")
PARAMETERS = ("beta", "gamma", "delta", "omega", "theta")


@dataclass(frozen=True)
class SimParams:
    n_sets: int = 1020
    m: int = 10
    reps: int = 500
    beta: float = 0.3
    gamma: float = 0.2
    delta: float = 0.15
    omega: float = 0.09
    theta: float = 0.05
    x_prevalence: float = 0.4
    z1_logU_corr: float = 0.35
    alpha_mean: float = -3.0
    alpha_sd: float = 2.0
    poolsizes: tuple[int, ...] = (4, 6, 10)
    seed: int = 20240101
    case_mode: str = "conditional"
    ci_level: float = 0.95

    def __post_init__(self):
        if self.n_sets < 1 or self.m < 1 or self.reps < 1:
            raise InputError("n_sets, m and reps must all be >= 1")
        if not abs(self.z1_logU_corr) < 1:
            raise InputError("|z1_logU_corr| must be < 1")
        if not 0 < self.x_prevalence < 1:
            raise InputError("x_prevalence must lie in (0, 1)")
        if self.alpha_sd < 0:
            raise InputError("alpha_sd must be >= 0")
        if self.case_mode not in ("conditional", "bernoulli"):
            raise InputError(f"unknown case_mode {self.case_mode!r}")
        if any(g < 1 for g in self.poolsizes):
            raise InputError("pool sizes must be >= 1")

    @property
    def truth(self) -> np.ndarray:
        return np.array([self.beta, self.gamma, self.delta, self.omega, self.theta])


def _draw_subjects(rng, p: SimParams, size):
    z = rng.standard_normal((size, 2))
    r = p.z1_logU_corr
    log_u = z[:, 0]
    z1 = r * z[:, 0] + np.sqrt(1.0 - r * r) * z[:, 1]
    x = (rng.random(size) < p.x_prevalence).astype(float)
    z2 = rng.standard_normal(size)
    u = np.exp(log_u)
    return np.column_stack([u, x, z1, z2])


def _linear_predictor(p: SimParams, cov, alpha):
    u, x, z1, z2 = cov.T
    return alpha + p.beta * u + p.gamma * x + p.delta * z1 + p.omega * z2 + p.theta * u * z2


def _draw_set(rng, p: SimParams, max_tries=100_000):
    width = p.m + 1
    for _ in range(max_tries):
        alpha = rng.normal(p.alpha_mean, p.alpha_sd)
        cov = _draw_subjects(rng, p, width)
        eta = _linear_predictor(p, cov, alpha)
        if p.case_mode == "conditional":
            w = np.exp(eta - eta.max())
            case = rng.choice(width, p=w / w.sum())
        else:
            d = rng.random(width) < 1.0 / (1.0 + np.exp(-eta))
            if d.sum() != 1:
                continue
            case = int(np.flatnonzero(d)[0])
        order = [case] + [j for j in range(width) if j != case]
        return cov[order]
    raise RuntimeError("rejection sampling did not produce a one-case set")


def generate_values(p: SimParams, rep: int) -> np.ndarray:
    """Covariates of one replicate as ``(n_sets, m + 1, 4)``, case in slot 0.

    Every (replicate, stratum) pair has its own random stream.
    """
    out = np.empty((p.n_sets, p.m + 1, len(COVARIATES)))
    for i in range(p.n_sets):
        out[i] = _draw_set(np.random.default_rng([p.seed, rep, i]), p)
    return out


def generate_cohort(p: SimParams, rep: int) -> Cohort:
    return cohort_from_tensor(generate_values(p, rep), COVARIATES, prefix=f"r{rep}s")


def _pool_seed(p: SimParams, rep: int, g: int) -> int:
    return int(np.random.SeedSequence([p.seed, rep, g, 7]).generate_state(1, np.uint64)[0] >> 1)


def analysis_names(p: SimParams) -> list[str]:
    return ["unpooled"] + [f"g={g}" for g in p.poolsizes]


@dataclass
class RepOutcome:
    rep: int
    estimates: dict          # analysis -> (p,) or None
    ses: dict
    converged: dict
    errors: dict


def run_rep(p: SimParams, rep: int) -> RepOutcome:
    cohort = generate_cohort(p, rep)
    terms = parse_terms(TERMS)
    T = subject_tensor(cohort, terms)
    names = [t.render() for t in terms]
    index = {ms.stratum_id: i for i, ms in enumerate(cohort.sets)}
    designs = {"unpooled": lambda: ConditionalDesign.from_tensor(T, names)}
    for g in p.poolsizes:
        def pooled(g=g):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", (BiasWarning, DisclosureWarning))
                plan = plan_pools(p.n_sets, g, DROP_REMAINDER, m=p.m)
                a = assign_pools(cohort, plan, _pool_seed(p, rep, g))
            return aggregate_tensor(T, index, a, names)
        designs[f"g={g}"] = pooled
    out = RepOutcome(rep, {}, {}, {}, {})
    for name, build in designs.items():
        try:
            res = fit(build(), ci_level=p.ci_level)
        except ClrPoolError as exc:
            out.estimates[name] = out.ses[name] = None
            out.converged[name] = False
            out.errors[name] = f"{type(exc).__name__}: {exc}"
            continue
        out.estimates[name] = res.beta_hat
        out.ses[name] = res.se
        out.converged[name] = res.converged
    return out


@dataclass
class SummaryRow:
    estimate: float
    mcse: float | None
    model_se: float
    coverage: float
    n: int


@dataclass
class SimulationReport:
    params: SimParams
    analyses: list[str]
    parameters: list[str]
    summary: dict                   # (parameter, analysis) -> SummaryRow
    estimates: dict = field(repr=False, default_factory=dict)   # analysis -> (reps, p)
    ses: dict = field(repr=False, default_factory=dict)
    n_reps: int = 0
    non_converged: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    def row(self, parameter: str, analysis: str) -> SummaryRow:
        return self.summary[(parameter, analysis)]

    def to_dict(self, per_rep: bool = True) -> dict:
        params = asdict(self.params)
        params["poolsizes"] = list(self.params.poolsizes)
        d = {
            "kind": "simulation_report",
            "params": params,
            "analyses": self.analyses,
            "parameters": self.parameters,
            "truth": self.params.truth.tolist(),
            "n_reps": self.n_reps,
            "non_converged": self.non_converged,
            "failures": self.failures,
            "summary": {a: {par: asdict(self.summary[(par, a)]) for par in self.parameters}
                        for a in self.analyses},
        }
        if per_rep:
            d["estimates"] = {a: _nan_to_none(v.tolist()) for a, v in self.estimates.items()}
            d["ses"] = {a: _nan_to_none(v.tolist()) for a, v in self.ses.items()}
        return d

    def to_json(self, path=None, **kw):
        text = json.dumps(self.to_dict(), **kw)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationReport":
        params = dict(d["params"])
        params["poolsizes"] = tuple(params["poolsizes"])
        sp = SimParams(**params)
        summary = {(par, a): SummaryRow(**d["summary"][a][par])
                   for a in d["analyses"] for par in d["parameters"]}
        est = {a: np.array(_none_to_nan(v), dtype=float) for a, v in d.get("estimates", {}).items()}
        ses = {a: np.array(_none_to_nan(v), dtype=float) for a, v in d.get("ses", {}).items()}
        return cls(sp, list(d["analyses"]), list(d["parameters"]), summary, est, ses,
                   int(d["n_reps"]), dict(d.get("non_converged", {})), dict(d.get("failures", {})))


def _nan_to_none(rows):
    return [[None if v != v else v for v in r] for r in rows]


def _none_to_nan(rows):
    return [[float("nan") if v is None else v for v in r] for r in rows]


def summarize(p: SimParams, outcomes: list[RepOutcome]) -> SimulationReport:
    analyses = analysis_names(p)
    k = len(PARAMETERS)
    truth = p.truth
    z = float(stats.norm.ppf(0.5 + p.ci_level / 2))
    estimates, ses, summary = {}, {}, {}
    non_conv, failures = {}, {}
    for a in analyses:
        est = np.full((len(outcomes), k), np.nan)
        se = np.full((len(outcomes), k), np.nan)
        for i, o in enumerate(outcomes):
            if o.estimates.get(a) is not None:
                est[i], se[i] = o.estimates[a], o.ses[a]
        estimates[a], ses[a] = est, se
        non_conv[a] = sum(1 for o in outcomes if o.estimates.get(a) is not None
                          and not o.converged[a])
        failures[a] = sum(1 for o in outcomes if o.estimates.get(a) is None)
        ok = ~np.isnan(est[:, 0])
        for j, par in enumerate(PARAMETERS):
            e, s = est[ok, j], se[ok, j]
            n = int(ok.sum())
            covered = np.abs(e - truth[j]) <= z * s
            summary[(par, a)] = SummaryRow(
                estimate=float(e.mean()) if n else float("nan"),
                mcse=float(e.std(ddof=1)) if n >= 2 else None,
                model_se=float(s.mean()) if n else float("nan"),
                coverage=float(covered.mean()) if n else float("nan"),
                n=n,
            )
    return SimulationReport(p, analyses, list(PARAMETERS), summary, estimates, ses,
                            len(outcomes), non_conv, failures)


def run_monte_carlo(p: SimParams, workers: int = 1, progress=None) -> SimulationReport:
    """Run ``p.reps`` replicates and summarize them; per-replicate results are merged in order."""
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            outcomes = list(ex.map(lambda r: run_rep(p, r), range(p.reps)))
    else:
        outcomes = []
        for r in range(p.reps):
            outcomes.append(run_rep(p, r))
            if progress is not None:
                progress(r + 1, p.reps)
    return summarize(p, outcomes)


def scatter_rows(report: SimulationReport, g: int):
    """Paired (unpooled, pooled at ``g``) estimates, one row per replicate and parameter."""
    key = f"g={g}"
    if key not in report.estimates:
        raise InputError(f"report has no pooled analysis for g={g}")
    base, pooled = report.estimates["unpooled"], report.estimates[key]
    truth = report.params.truth
    rows = []
    for rep in range(base.shape[0]):
        for j, par in enumerate(report.parameters):
            rows.append((rep, par, float(truth[j]), float(base[rep, j]), float(pooled[rep, j])))
    return rows


def scatter_export(report: SimulationReport, g: int, path) -> int:
    rows = scatter_rows(report, g)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rep", "parameter", "truth", "unpooled", f"pooled_g{g}"])
        w.writerows([r[0], r[1], repr(r[2]), repr(r[3]), repr(r[4])] for r in rows)
    return len(rows)
