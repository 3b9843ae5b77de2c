"""Command line interface.

Exit status: 0 success, 1 input or configuration error, 2 numerical
failure (including a fit that did not converge).
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from . import __version__
from .cohort import Cohort, MatchedSet, read_cohort_csv, read_rows, write_cohort_csv
from .engine import FitResult, fit
from .errors import ClrPoolError, InputError, NumericalError
from .pooling import (
    PoolAssignment,
    aggregate,
    assign_pools,
    bootstrap_strata,
    plan_pools,
    read_pooled_csv,
    resolve_seed,
    unpooled_design,
    write_pooled_csv,
)
from .terms import parse_terms

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 1, 2


# --- helpers -----------------------------------------------------------------

def _terms_or_default(terms, names):
    return list(terms) if terms else list(names)


def _fit_table(res: FitResult) -> str:
    lvl = round(res.ci_level * 100)
    head = f"{'term':<20} {'estimate':>10} {'se':>10} {'OR':>10} {f'{lvl}% CI':>22}"
    lines = [head, "-" * len(head)]
    for j, t in enumerate(res.term_names):
        lo, hi = res.or_ci[j]
        lines.append(f"{t:<20} {res.beta_hat[j]:>10.4f} {res.se[j]:>10.4f} "
                     f"{res.odds_ratios[j]:>10.4f} {f'({lo:.4f}, {hi:.4f})':>22}")
    lines.append(f"strata={res.n_strata} loglik={res.log_lik:.6f} aic={res.aic:.4f} "
                 f"iterations={res.iterations} converged={res.converged}")
    return "\n".join(lines)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def _report_fit(res: FitResult, out) -> int:
    print(_fit_table(res))
    if out:
        _write_json(out, res.to_dict())
    if not res.converged:
        print(f"error: NotConverged: no convergence after {res.iterations} iterations "
              f"(gradient norm {res.gradient_norm:.3g})", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _is_pooled(path) -> bool:
    _, header = read_rows(path)
    return "pool_id" in header


def _labels(cohort: Cohort, column: str | None):
    if column is None:
        return None
    if column not in cohort.covariate_names:
        raise InputError(f"label column {column!r} not in cohort")
    return {ms.stratum_id: f"{ms.case.covariates[column]:g}" for ms in cohort.sets}


def _load_assignment(path) -> PoolAssignment:
    try:
        return PoolAssignment.from_dict(json.loads(Path(path).read_text()))
    except FileNotFoundError:
        raise InputError(f"no such file: {path}") from None
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"{path}: not a pool assignment ({exc})") from None


# --- subcommands -------------------------------------------------------------

def cmd_fit(args) -> int:
    if _is_pooled(args.input):
        names = [t.render() for t in parse_terms(args.term)] if args.term else None
        design = read_pooled_csv(args.input, names)
    else:
        cohort = read_cohort_csv(args.input)
        design = unpooled_design(cohort, _terms_or_default(args.term, cohort.covariate_names))
    res = fit(design, tol=args.tol, max_iter=args.max_iter, ci_level=args.ci_level)
    return _report_fit(res, args.out)


def cmd_plan(args) -> int:
    plan = plan_pools(args.sets, args.pool_size, args.policy, args.secondary_min)
    print(plan.summary())
    if args.out:
        _write_json(args.out, plan.to_dict())
    return EXIT_OK


def cmd_pool(args) -> int:
    cohort = read_cohort_csv(args.input)
    terms = _terms_or_default(args.term, cohort.covariate_names)
    if args.assignment:
        assignment = _load_assignment(args.assignment)
    else:
        plan = plan_pools(cohort.n_sets, args.pool_size, args.policy, args.secondary_min,
                          m=cohort.m)
        assignment = assign_pools(cohort, plan, resolve_seed(args.seed),
                                  _labels(cohort, args.label_column), args.secondary_min)
    print(f"seed: {assignment.seed}")
    print(assignment.plan.summary())
    design = aggregate(cohort, assignment, terms)
    write_pooled_csv(design, args.out)
    if args.assignment_out:
        _write_json(args.assignment_out, assignment.to_dict())
    return EXIT_OK


def _protocol_shards(args) -> tuple[dict, list[str]]:
    from .protocol import shards_from_cohort

    if args.input_dir:
        base = Path(args.input_dir)
        if not base.is_dir():
            raise InputError(f"no such directory: {base}")
        nodes = args.nodes.split(",") if args.nodes else sorted(p.stem for p in base.glob("*.csv"))
        shards = {}
        for n in nodes:
            path = base / f"{n}.csv"
            if path.exists():
                shard = read_cohort_csv(path)
                foreign = [x for x in shard.node_ids if x != n]
                if foreign:
                    raise InputError(f"{path}: rows for other node(s) {foreign}")
                shards[n] = shard
        return shards, nodes
    if not args.input:
        raise InputError("give --input-dir or --input")
    cohort = read_cohort_csv(args.input)
    if args.nodes and args.nodes.isdigit():
        k = int(args.nodes)
        if k < 1:
            raise InputError("--nodes must be >= 1")
        names = [f"node{i + 1}" for i in range(k)]
        groups: dict[str, list] = {n: [] for n in names}
        for i, ms in enumerate(cohort.sets):
            node = names[i % k]
            subjects = tuple(type(s)(s.subject_id, s.stratum_id, node, s.outcome, s.covariates)
                             for s in ms.subjects)
            groups[node].append(MatchedSet(ms.stratum_id, subjects))
        shards = {n: Cohort(tuple(sets), cohort.covariate_names) for n, sets in groups.items()}
        return shards, names
    shards = shards_from_cohort(cohort)
    nodes = args.nodes.split(",") if args.nodes else sorted(shards)
    return {n: s for n, s in shards.items() if n in nodes}, nodes


def cmd_protocol(args) -> int:
    from .protocol import ProtocolConfig, run_protocol

    shards, nodes = _protocol_shards(args)
    if not shards:
        raise InputError("no node data found")
    names = next(iter(shards.values())).covariate_names
    terms = _terms_or_default(args.term, names)
    assignment = _load_assignment(args.assignment) if args.assignment else None
    seed = None if assignment else resolve_seed(args.seed)
    if args.transcript:
        Path(args.transcript).write_text("")
    cfg = ProtocolConfig(shards=shards, terms=terms, pool_size=args.pool_size,
                         policy=args.policy, secondary_min=args.secondary_min, seed=seed,
                         assignment=assignment, ci_level=args.ci_level,
                         mask_seed=args.mask_seed, transcript_path=args.transcript,
                         expected_nodes=nodes)
    try:
        run = run_protocol(cfg)
    except ClrPoolError as exc:
        print(f"error: protocol stage {getattr(exc, 'stage', None)!r}: {type(exc).__name__}: "
              f"{exc}", file=sys.stderr)
        raise _Reported(EXIT_NUMERICAL if isinstance(exc, NumericalError) else EXIT_INPUT)
    print(f"seed: {run.assignment.seed}")
    print(f"nodes: {', '.join(f'{n}={c}' for n, c in run.enumeration['counts'].items())}")
    print(run.assignment.plan.summary())
    if args.assignment_out:
        _write_json(args.assignment_out, run.assignment.to_dict())
    return _report_fit(run.fit, args.out)


def cmd_simulate(args) -> int:
    from .report import render_simulation
    from .sim import SimParams, run_monte_carlo, scatter_export

    seed = resolve_seed(args.seed)
    p = SimParams(n_sets=args.sets, m=args.controls, reps=args.reps, beta=args.beta,
                  gamma=args.gamma, delta=args.delta, omega=args.omega, theta=args.theta,
                  poolsizes=tuple(args.pool_sizes), seed=seed, case_mode=args.case_mode)
    print(f"seed: {seed}")
    report = run_monte_carlo(p, workers=args.workers)
    print(render_simulation(report, markdown=args.markdown))
    if args.out:
        report.to_json(args.out)
    if args.scatter_out:
        g = args.scatter_g if args.scatter_g is not None else p.poolsizes[0]
        scatter_export(report, g, args.scatter_out)
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    cohort = read_cohort_csv(args.input)
    seed = resolve_seed(args.seed)
    print(f"seed: {seed}")
    write_cohort_csv(bootstrap_strata(cohort, args.sets, seed), args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import render_paths

    print(render_paths(args.inputs, args.name, markdown=args.markdown))
    return EXIT_OK


# --- parser ------------------------------------------------------------------

class _Reported(Exception):
    """Error already printed; carries the exit status."""

    def __init__(self, status):
        self.status = status


def _positive_reps(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _pool_args(p):
    p.add_argument("--pool-size", "-g", type=int, default=5)
    p.add_argument("--policy", choices=["cover-all", "drop-remainder", "cover_all",
                                        "drop_remainder"], default="cover-all")
    p.add_argument("--secondary-min", type=int, default=3,
                   help="smallest size allowed for the secondary pools (cover-all)")
    p.add_argument("--seed", type=int, help="pooling seed; generated and printed if omitted")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are input errors (exit 1), not numerical ones
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="clrpool", description=__doc__.splitlines()[0])
    top.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = top.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="JSON file whose keys mirror this command's flags")
        p.set_defaults(func=func)
        return p

    p = add("fit", cmd_fit, "fit conditional logistic regression to a cohort or pooled CSV")
    p.add_argument("--input", "-i", required=True)
    p.add_argument("--term", "-t", action="append", default=None,
                   help="model term, e.g. age, log(age), age^2, log(age):marker (repeatable)")
    p.add_argument("--out", "-o", help="FitResult JSON")
    p.add_argument("--ci-level", type=float, default=0.95)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=50)

    p = add("plan", cmd_plan, "show the pool plan for N matched sets")
    p.add_argument("--sets", "-n", type=int, required=True)
    _pool_args(p)
    p.add_argument("--out", "-o", help="plan JSON")

    p = add("pool", cmd_pool, "pool a cohort CSV into a pooled design CSV")
    p.add_argument("--input", "-i", required=True)
    p.add_argument("--term", "-t", action="append", default=None)
    _pool_args(p)
    p.add_argument("--label-column", help="pool only within classes of this case covariate")
    p.add_argument("--assignment", help="reuse a saved assignment JSON instead of drawing one")
    p.add_argument("--out", "-o", required=True, help="pooled CSV")
    p.add_argument("--assignment-out", help="assignment JSON")

    p = add("protocol", cmd_protocol, "run the distributed pooled analysis over node CSVs")
    p.add_argument("--input-dir", help="directory holding one <node>.csv per node")
    p.add_argument("--input", "-i", help="single cohort CSV split by its node_id column")
    p.add_argument("--nodes", help="comma-separated node ids, or a count to split --input")
    p.add_argument("--term", "-t", action="append", default=None)
    _pool_args(p)
    p.add_argument("--assignment", help="assignment JSON keyed by stratum id")
    p.add_argument("--mask-seed", type=int, help="seed the AC's masks (testing only)")
    p.add_argument("--ci-level", type=float, default=0.95)
    p.add_argument("--transcript", help="message transcript JSONL")
    p.add_argument("--out", "-o", help="FitResult JSON")
    p.add_argument("--assignment-out", help="assignment JSON (node#index ids)")

    p = add("simulate", cmd_simulate, "Monte Carlo comparison of unpooled and pooled fits")
    p.add_argument("--sets", type=int, default=1020)
    p.add_argument("--controls", type=int, default=10)
    p.add_argument("--reps", type=_positive_reps, default=500)
    p.add_argument("--beta", type=float, default=0.3)
    p.add_argument("--gamma", type=float, default=0.2)
    p.add_argument("--delta", type=float, default=0.15)
    p.add_argument("--omega", type=float, default=0.09)
    p.add_argument("--theta", type=float, default=0.05)
    p.add_argument("--pool-sizes", type=int, nargs="+", default=[4, 6, 10])
    p.add_argument("--seed", type=int, default=20240101)
    p.add_argument("--case-mode", choices=["conditional", "bernoulli"], default="conditional")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--markdown", action="store_true")
    p.add_argument("--out", "-o", help="SimulationReport JSON")
    p.add_argument("--scatter-out", help="CSV of paired unpooled/pooled estimates")
    p.add_argument("--scatter-g", type=int, help="pool size for --scatter-out")

    p = add("bootstrap", cmd_bootstrap, "resample matched sets with replacement")
    p.add_argument("--input", "-i", required=True)
    p.add_argument("--sets", "-n", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", "-o", required=True)

    p = add("report", cmd_report, "render saved fit or simulation JSON as a table")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--name", action="append", help="column label per input (repeatable)")
    p.add_argument("--markdown", action="store_true")
    return top


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser, argv):
    """Parse ``argv`` with defaults taken from ``--config``; explicit flags still win."""
    argv = list(sys.argv[1:] if argv is None else argv)
    path = _config_path(argv)
    choices = parser._subparsers._group_actions[0].choices
    command = next((t for t in argv if t in choices), None)
    if path is None or command is None:
        return parser.parse_args(argv)
    try:
        conf = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(conf, dict):
        raise InputError(f"{path}: expected a JSON object")
    sub = choices[command]
    conf = {k.replace("-", "_"): v for k, v in conf.items()}
    unknown = sorted(set(conf) - {a.dest for a in sub._actions})
    if unknown:
        raise InputError(f"{path}: unknown keys {unknown}")
    for a in sub._actions:
        if a.dest in conf:
            a.required = False
    # argparse appends to a list default, so repeatable flags replace the file's list instead
    appended = {a.dest for a in sub._actions if isinstance(a, argparse._AppendAction)}
    sub.set_defaults(**{k: v for k, v in conf.items() if k not in appended})
    args = parser.parse_args(argv)
    for k in appended & set(conf):
        if getattr(args, k) is None:
            setattr(args, k, conf[k])
    return args


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"warning: {category.__name__}: {message}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    shown = warnings.showwarning
    warnings.showwarning = _show_warning
    try:
        try:
            args = _apply_config(parser, argv)
        except SystemExit as exc:          # usage errors, --help, --version
            return exc.code if isinstance(exc.code, int) else EXIT_INPUT
        return args.func(args)
    except _Reported as r:
        return r.status
    except NumericalError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ClrPoolError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    finally:
        warnings.showwarning = shown


if __name__ == "__main__":
    sys.exit(main())
