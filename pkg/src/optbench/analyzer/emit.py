"""pgfplots learning curves and tunability plots, the results table, and a CSV
twin for each of them."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import re
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

from ..runner import METRICS
from ..tuner import TuningResult, tunability_curve
from .report import BenchmarkReport, ReportEntry
from .stats import AggregateCurve

logger = logging.getLogger(__name__)

COLORS = ("blue", "red", "green!60!black", "orange", "violet", "teal", "brown", "gray")
PANEL_TITLES = {"train_losses": "train loss", "test_losses": "test loss",
                "train_accuracies": "train accuracy", "test_accuracies": "test accuracy"}
HPARAM_SYMBOLS = {"learning_rate": r"$\alpha$", "momentum": r"$\mu$", "beta1": r"$\beta_1$",
                  "beta2": r"$\beta_2$", "epsilon": r"$\epsilon$"}

_LATEX_SPECIAL = {"\\": r"\textbackslash{}", "&": r"\&", "%": r"\%", "$": r"\$", "#": r"\#",
                  "_": r"\_", "{": r"\{", "}": r"\}", "~": r"\textasciitilde{}", "^": r"\textasciicircum{}"}


def latex_escape(text: str) -> str:
    return "".join(_LATEX_SPECIAL.get(c, c) for c in str(text))


# -- number formatting ---------------------------------------------------------------

def format_accuracy(value: float) -> str:
    """0.9234 -> ``"92.34 %"``."""
    return f"{100 * value:.2f} %" if math.isfinite(value) else "nan"


def format_loss(value: float) -> str:
    """Two decimals; scientific below 0.01 so small losses stay visible."""
    if not math.isfinite(value):
        return "nan"
    return f"{value:.2f}" if value == 0 or abs(value) >= 0.01 else f"{value:.2e}"


def format_speed(value: float) -> str:
    return f"{value:.1f}"


def format_hparam(name: str, value: float) -> str:
    """``learning_rate`` as ``3.98e-04``, everything else in shortest form (``1e-08``)."""
    return f"{value:.2e}" if name == "learning_rate" else f"{value:g}"


def _is_accuracy(entry: ReportEntry) -> bool:
    return entry.criterion == "test_accuracy"


def format_performance_plain(entry: ReportEntry) -> str:
    m, s = entry.performance_mean, entry.performance_std
    if _is_accuracy(entry):
        return f"{format_accuracy(m)} ± {100 * s:.2f}"
    return f"{format_loss(m)} ± {format_loss(s)}"


def format_performance_latex(entry: ReportEntry) -> str:
    m, s = entry.performance_mean, entry.performance_std
    if _is_accuracy(entry):
        pct = format_accuracy(m).replace("%", r"\%")
        cell = f"{pct} $\\pm$ {100 * s:.2f}"
    else:
        cell = f"{format_loss(m)} $\\pm$ {format_loss(s)}"
    if entry.diverged_count:
        cell += f" ({entry.diverged_count}/{entry.seed_count} div.)"
    return cell


def summary_lines(report: BenchmarkReport) -> list[str]:
    """Plain-text rows: performance as mean ± std, speed in epochs."""
    lines = []
    for e in report.entries:
        sp = "n/a" if e.speed is None else format_speed(e.speed)
        div = f", {e.diverged_count} diverged" if e.diverged_count else ""
        lines.append(f"{e.problem:16s} {e.label:22s} {format_performance_plain(e)}  "
                     f"speed {sp} epochs  ({e.seed_count} seeds{div})")
    return lines


# -- helpers -------------------------------------------------------------------------

def _column(label: str, taken: set[str]) -> str:
    base = re.sub(r"[^A-Za-z0-9]+", "", label) or "series"
    name, k = base, 2
    while name in taken:
        name, k = f"{base}{k}", k + 1
    taken.add(name)
    return name


def _num(x: float) -> str:
    return repr(float(x)) if math.isfinite(x) else "nan"


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _labelled(aggregates) -> list[tuple[str, AggregateCurve]]:
    out = []
    for item in aggregates:
        out.append(item if isinstance(item, tuple) else (item.optimizer, item))
    return out


# -- learning curves -------------------------------------------------------------------

def emit_learning_curves(aggregates: Iterable[AggregateCurve | tuple[str, AggregateCurve]],
                         destination: str | os.PathLike) -> list[Path]:
    """Per problem: ``<problem>_curves.tex`` (one panel per available metric,
    mean line and ±std band per optimizer) and ``<problem>_curves.csv``.

    Items are aggregates (labelled by optimizer) or ``(label, aggregate)`` pairs.
    """
    dest = Path(destination)
    by_problem: dict[str, list[tuple[str, AggregateCurve]]] = defaultdict(list)
    for label, agg in _labelled(aggregates):
        by_problem[agg.problem].append((label, agg))
    if not by_problem:
        raise ValueError("emit_learning_curves needs at least one aggregate")
    written = []
    for problem, series in by_problem.items():
        metrics = [m for m in METRICS if all(m in agg.mean for _, agg in series)]
        taken: set[str] = set()
        cols = [_column(label, taken) for label, _ in series]
        n_rows = max(agg.epochs for _, agg in series) + 1
        header = ["epoch"] + [f"{c}_{m}_{s}" for c in cols for m in metrics for s in ("mean", "std")]
        rows = []
        for epoch in range(n_rows):
            row = [epoch]
            for _, agg in series:
                for m in metrics:
                    for arr in (agg.mean[m], agg.std[m]):
                        row.append(_num(arr[epoch]) if epoch < len(arr) else "nan")
            rows.append(row)
        csv_path = _write(dest / f"{problem}_curves.csv", _csv_text(header, rows))
        tex = _curves_tex(problem, series, cols, metrics, csv_path.name)
        written += [_write(dest / f"{problem}_curves.tex", tex), csv_path]
    return written


def _curves_tex(problem, series, cols, metrics, csv_name) -> str:
    rows = 2 if len(metrics) > 2 else 1
    lines = [
        f"% learning curves for {problem}; data in {csv_name}",
        r"% needs \usepgfplotslibrary{groupplots,fillbetween}",
        r"\begin{tikzpicture}",
        r"\begin{groupplot}[group style={group size=2 by %d, horizontal sep=1.8cm, vertical sep=1.6cm}," % rows,
        r"  width=6cm, height=4.5cm, xlabel={epoch}, unbounded coords=jump, legend style={font=\tiny}]",
    ]
    for m in metrics:
        lines.append(rf"\nextgroupplot[title={{{PANEL_TITLES[m]}}}]")
        for i, ((label, _), col) in enumerate(zip(series, cols)):
            color = COLORS[i % len(COLORS)]
            mean, std = f"{col}_{m}_mean", f"{col}_{m}_std"
            table = f"table[x=epoch, y={mean}, col sep=comma] {{{csv_name}}}"
            lines.append(rf"\addplot[mark=none, thick, color={color}] {table};")
            lines.append(rf"\addlegendentry{{{latex_escape(label)}}}")
            for path, sign in (("hi", "+"), ("lo", "-")):
                lines.append(
                    rf"\addplot[name path={col}{m}{path}, draw=none, forget plot] "
                    rf"table[x=epoch, y expr=\thisrow{{{mean}}}{sign}\thisrow{{{std}}}, col sep=comma] "
                    rf"{{{csv_name}}};")
            lines.append(rf"\addplot[fill={color}, fill opacity=0.2, draw=none, forget plot] "
                         rf"fill between[of={col}{m}hi and {col}{m}lo];")
    lines += [r"\end{groupplot}", r"\end{tikzpicture}", ""]
    return "\n".join(lines)


# -- tunability ----------------------------------------------------------------------

def emit_tunability_plot(results: Iterable[TuningResult], destination: str | os.PathLike) -> list[Path]:
    """Per problem: ``<problem>_tuning.tex`` (log-scaled learning rate against
    relative performance, one series per optimizer) and its CSV twin."""
    dest = Path(destination)
    by_problem: dict[str, list[TuningResult]] = defaultdict(list)
    for r in results:
        by_problem[r.problem].append(r)
    if not by_problem:
        logger.warning("no tuning results: no tunability plot written")
        return []
    written = []
    for problem, group in by_problem.items():
        lines = [f"% relative performance against learning rate for {problem}",
                 r"\begin{tikzpicture}",
                 r"\begin{axis}[xmode=log, xlabel={learning rate $\alpha$}, "
                 r"ylabel={relative performance}, legend pos=south west, legend style={font=\tiny}]"]
        rows = []
        for i, result in enumerate(group):
            curve = tunability_curve(result)
            pts = curve.points()
            color = COLORS[i % len(COLORS)]
            coords = " ".join(f"({_num(a)},{_num(r)})" for a, r in pts)
            lines.append(rf"\addplot[mark=*, color={color}] coordinates {{{coords}}};")
            lines.append(rf"\addlegendentry{{{latex_escape(result.optimizer)}}}")
            if curve.winner_alpha is not None:
                lines.append(rf"\addplot[only marks, mark=star, mark size=4pt, color={color}, forget plot] "
                             rf"coordinates {{({_num(curve.winner_alpha)},1.0)}};")
            rows += [[result.optimizer, _num(a), _num(r), int(a == curve.winner_alpha)] for a, r in pts]
        lines += [r"\end{axis}", r"\end{tikzpicture}", ""]
        written.append(_write(dest / f"{problem}_tuning.tex", "\n".join(lines)))
        written.append(_write(dest / f"{problem}_tuning.csv",
                              _csv_text(["optimizer", "alpha", "relative", "winner"], rows)))
    return written


# -- table ---------------------------------------------------------------------------

TABLE_CSV_FIELDS = ("problem", "optimizer", "source", "criterion", "performance_mean", "performance_std",
                    "seed_count", "diverged_count", "speed_epochs", "iterations_per_epoch", "epochs",
                    "hyperparams", "budget_runs", "budget_epochs", "overhead")


def _tunability_cell(entry: ReportEntry) -> str:
    parts = [f"{HPARAM_SYMBOLS.get(k, latex_escape(k))}: {format_hparam(k, v)}"
             for k, v in entry.hyperparams.items()]
    return parts[0] if len(parts) == 1 else r"\makecell{" + r"\\ ".join(parts) + "}"


def render_table(report: BenchmarkReport) -> str:
    labels = report.labels()
    lines = [
        r"% needs \usepackage{booktabs,multirow,makecell}",
        r"\begin{tabular}{l" + "l" * (len(labels) + 1) + "}",
        r"\toprule",
        r"\textbf{Test Problem} & & " + " & ".join(rf"\textbf{{{latex_escape(l)}}}" for l in labels) + r" \\",
        r"\midrule",
    ]
    for problem in report.problems():
        cells = {l: report.entry(problem, l) for l in labels}

        def row(fn):
            return " & ".join("--" if cells[l] is None else fn(cells[l]) for l in labels)

        lines.append(rf"\multirow{{3}}{{*}}{{{latex_escape(problem)}}} & Performance & "
                     f"{row(format_performance_latex)}" + r" \\")
        lines.append(r" & Speed & " + row(lambda e: "--" if e.speed is None else format_speed(e.speed)) + r" \\")
        lines.append(r" & Tuneability & " + row(_tunability_cell) + r" \\")
        lines.append(r"\midrule")
    lines[-1] = r"\bottomrule"
    lines += [r"\end{tabular}", ""]
    return "\n".join(lines)


def table_rows(report: BenchmarkReport) -> list[list]:
    rows = []
    for e in report.entries:
        budget = e.budget or {}
        hp = ";".join(f"{k}={v!r}" for k, v in e.hyperparams.items())
        rows.append([e.problem, e.optimizer, e.source, e.criterion, _num(e.performance_mean),
                     _num(e.performance_std), e.seed_count, e.diverged_count,
                     "" if e.speed is None else _num(e.speed), e.iterations_per_epoch, e.epochs, hp,
                     budget.get("runs", ""), budget.get("epochs", ""),
                     "" if e.overhead is None else _num(e.overhead)])
    return rows


def emit_table(report: BenchmarkReport, destination: str | os.PathLike) -> list[Path]:
    """``benchmark_table.tex`` and ``benchmark_table.csv`` (full precision)."""
    if not report:
        raise ValueError("cannot emit a table for an empty report")
    dest = Path(destination)
    return [_write(dest / "benchmark_table.tex", render_table(report)),
            _write(dest / "benchmark_table.csv", _csv_text(TABLE_CSV_FIELDS, table_rows(report)))]
