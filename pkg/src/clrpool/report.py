"""Text and markdown rendering of simulation reports and fit comparisons."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

from .engine import FitResult
from .errors import InputError
from .sim import SimulationReport

GREEK = {"beta": "β", "gamma": "γ", "delta": "δ", "omega": "ω", "theta": "ϑ"}
STATS = (("Estimate", "estimate"), ("MCSE", "mcse"), ("ModelSE", "model_se"),
         ("Coverage", "coverage"))


def _fmt(v, digits=3):
    if v is None or v != v:
        return "NA"
    return f"{v:.{digits}f}"


def _table(header: Sequence[str], rows: Sequence[Sequence[str]], markdown: bool) -> str:
    if markdown:
        lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(lines)
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
    fmt = lambda r: "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                              for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows])


def _analysis_label(a: str) -> str:
    return "Unpooled" if a == "unpooled" else a.replace("g=", "g = ")


def render_simulation(report: SimulationReport, markdown: bool = False, digits: int = 3) -> str:
    """Parameter blocks (estimate, MCSE, ModelSE, coverage) by analysis column."""
    header = ["Parameter"] + [_analysis_label(a) for a in report.analyses]
    rows = []
    truth = report.params.truth
    for j, par in enumerate(report.parameters):
        rows.append([f"{GREEK.get(par, par)} = {truth[j]:g}"] + [""] * len(report.analyses))
        for label, attr in STATS:
            rows.append([f"  {label}"] + [_fmt(getattr(report.row(par, a), attr), digits)
                                          for a in report.analyses])
    text = _table(header, rows, markdown)
    tallies = ", ".join(f"{_analysis_label(a)}: {report.failures.get(a, 0)} failed / "
                        f"{report.non_converged.get(a, 0)} not converged"
                        for a in report.analyses)
    return f"{text}\n\n{report.n_reps} replicates ({tallies})"


def or_cell(res: FitResult, j: int, digits: int = 2) -> str:
    lo, hi = res.or_ci[j]
    return f"{res.odds_ratios[j]:.{digits}f} ({lo:.{digits}f}, {hi:.{digits}f})"


def render_fits(fits: Mapping[str, FitResult], markdown: bool = False, digits: int = 2,
                labels: Mapping[str, str] | None = None) -> str:
    """Odds ratio (CI) table with one column per fit; rows are the union of terms."""
    if not fits:
        raise InputError("no fits to render")
    terms: list[str] = []
    for res in fits.values():
        terms += [t for t in res.term_names if t not in terms]
    level = {round(r.ci_level * 100) for r in fits.values()}
    cap = f"OR ({level.pop()}% CI)" if len(level) == 1 else "OR (CI)"
    header = ["Variable"] + list(fits)
    rows = []
    for t in terms:
        row = [(labels or {}).get(t, t)]
        for res in fits.values():
            row.append(or_cell(res, res.term_names.index(t), digits) if t in res.term_names
                       else "")
        rows.append(row)
    return f"{cap}\n{_table(header, rows, markdown)}"


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc})") from None


def render_paths(paths: Sequence[str], names: Sequence[str] | None = None,
                 markdown: bool = False) -> str:
    """Render saved JSON outputs: one simulation report, or one or more fits."""
    docs = [load_json(p) for p in paths]
    if any(d.get("kind") == "simulation_report" for d in docs):
        if len(docs) != 1:
            raise InputError("render one simulation report at a time")
        return render_simulation(SimulationReport.from_dict(docs[0]), markdown)
    if names and len(names) != len(paths):
        raise InputError(f"{len(names)} column names given for {len(paths)} inputs")
    names = names or [Path(p).stem for p in paths]
    return render_fits({n: FitResult.from_dict(d) for n, d in zip(names, docs)}, markdown)
