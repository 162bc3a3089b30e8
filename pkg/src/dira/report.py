"""Result aggregation: statistical comparison and report building.

Reads the shared fine-tuning ledger CSV (method,task,metric,fraction,run,
value,checkpoint) plus optional localization CSVs, and writes per-task
tables (CSV + Markdown), metric-vs-label-fraction plots, and a top-level
report.md.  Each non-baseline row is annotated with its improvement over
the discrimination-only run of the same base method, with a Welch t-test
significance marker at p < 0.05.

The Welch p-value is computed here from first principles (test statistic,
Welch-Satterthwaite degrees of freedom, numerically integrated t tail);
library t-distributions are reserved for cross-checks in the test suite.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

SIGNIFICANCE_LEVEL = 0.05


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p_value: float


def _t_pdf(x: float, df: float) -> float:
    lognorm = (math.lgamma((df + 1.0) / 2.0) - math.lgamma(df / 2.0)
               - 0.5 * math.log(df * math.pi))
    return math.exp(lognorm - (df + 1.0) / 2.0 * math.log1p(x * x / df))


def _t_tail(t_abs: float, df: float) -> float:
    """P(T >= t_abs) for Student's t with ``df`` degrees of freedom, by
    adaptive quadrature of the density."""
    val, _ = integrate.quad(_t_pdf, t_abs, np.inf, args=(df,), limit=200)
    return float(min(max(val, 0.0), 0.5))


def welch_ttest(a, b) -> WelchResult:
    """Two-sided Welch's t-test for unequal variances.

    Degenerate inputs (zero variance in both groups) resolve to p = 1 for
    equal means and p = 0 otherwise instead of dividing by zero.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if len(a) < 2 or len(b) < 2:
        raise ValueError(f"welch_ttest needs >= 2 values per group, got {len(a)} and {len(b)}")
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1), b.var(ddof=1)
    na, nb = len(a), len(b)
    if va == 0.0 and vb == 0.0:
        if ma == mb:
            return WelchResult(t=0.0, df=float(na + nb - 2), p_value=1.0)
        return WelchResult(t=math.copysign(math.inf, ma - mb), df=float(na + nb - 2), p_value=0.0)
    se2 = va / na + vb / nb
    t = (ma - mb) / math.sqrt(se2)
    df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    p = 2.0 * _t_tail(abs(t), df)
    return WelchResult(t=float(t), df=float(df), p_value=float(min(p, 1.0)))


# --------------------------------------------------------------------------
# ledger reading
# --------------------------------------------------------------------------

def read_ledger(path: str | Path) -> list[dict]:
    """Rows of the results ledger; an absent or empty file reads as no
    results rather than an error."""
    path = Path(path)
    if not path.is_file():
        return []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            if raw.get("method") is None or raw.get("value") in (None, ""):
                continue
            rows.append({
                "method": raw["method"],
                "task": raw["task"],
                "metric": raw["metric"],
                "fraction": float(raw["fraction"]),
                "run": int(raw["run"]),
                "value": float(raw["value"]),
            })
        return rows


def _baseline_label(method: str) -> str | None:
    """moco-dira -> moco-di; labels without an ablation suffix (e.g. the
    random baseline) have no reference run."""
    if "-" not in method:
        return None
    base, abl = method.rsplit("-", 1)
    if abl in ("dir", "dira"):
        return f"{base}-di"
    return None


@dataclass
class TableRow:
    task: str
    metric: str
    fraction: float
    method: str
    n_runs: int
    mean: float
    std: float
    improvement: str = ""      # "+0.0123" vs the di baseline, "" when n/a
    p_value: str = ""
    significant: str = ""      # "yes" / "no" / ""


def build_table_rows(ledger_rows: list[dict]) -> list[TableRow]:
    groups: dict[tuple, list[float]] = {}
    for r in ledger_rows:
        key = (r["task"], r["metric"], r["fraction"], r["method"])
        groups.setdefault(key, []).append((r["run"], r["value"]))

    values = {k: [v for _, v in sorted(pairs)] for k, pairs in groups.items()}
    out: list[TableRow] = []
    for (task, metric, fraction, method) in sorted(values):
        vals = values[(task, metric, fraction, method)]
        row = TableRow(task=task, metric=metric, fraction=fraction, method=method,
                       n_runs=len(vals), mean=float(np.mean(vals)),
                       std=float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0)
        base_label = _baseline_label(method)
        base_vals = values.get((task, metric, fraction, base_label)) if base_label else None
        if base_vals:
            diff = row.mean - float(np.mean(base_vals))
            row.improvement = format(diff, "+.4g")
            if len(vals) >= 2 and len(base_vals) >= 2:
                res = welch_ttest(vals, base_vals)
                row.p_value = format(res.p_value, ".4g")
                row.significant = "yes" if (res.p_value < SIGNIFICANCE_LEVEL and diff > 0) else "no"
        out.append(row)
    return out


# --------------------------------------------------------------------------
# writers
# --------------------------------------------------------------------------

_TABLE_COLUMNS = ("task", "metric", "fraction", "method", "n_runs", "mean", "std",
                  "improvement", "p_value", "significant")


def _row_cells(row: TableRow) -> list[str]:
    return [row.task, row.metric, format(row.fraction, ".10g"), row.method,
            str(row.n_runs), format(row.mean, ".6g"), format(row.std, ".6g"),
            row.improvement, row.p_value, row.significant]


def _write_table_csv(path: Path, rows: list[TableRow]) -> None:
    lines = [",".join(_TABLE_COLUMNS)]
    lines += [",".join(_row_cells(r)) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_table_md(path: Path, rows: list[TableRow], title: str) -> None:
    lines = [f"# {title}", ""]
    lines.append("| " + " | ".join(_TABLE_COLUMNS) + " |")
    lines.append("|" + "---|" * len(_TABLE_COLUMNS))
    for r in rows:
        lines.append("| " + " | ".join(_row_cells(r)) + " |")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _plot_fraction_curves(path: Path, rows: list[TableRow], title: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    methods = sorted({r.method for r in rows})
    for method in methods:
        pts = sorted((r.fraction, r.mean, r.std) for r in rows if r.method == method)
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        es = [p[2] for p in pts]
        ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=method)
    ax.set_xlabel("label fraction")
    ax.set_ylabel(rows[0].metric if rows else "metric")
    ax.set_xscale("log")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def read_localization_csvs(paths: list[str | Path]) -> list[dict]:
    rows = []
    for p in paths:
        with open(p, "r", encoding="utf-8", newline="") as fh:
            for raw in csv.DictReader(fh):
                rows.append({
                    "method": raw["method"],
                    "delta": float(raw["delta"]),
                    "correct": int(raw["correct"]),
                    "total": int(raw["total"]),
                    "accuracy": float(raw["accuracy"]),
                })
    return sorted(rows, key=lambda r: (r["method"], r["delta"]))


def _plot_localization(path: Path, rows: list[dict]) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in sorted({r["method"] for r in rows}):
        pts = sorted((r["delta"], r["accuracy"]) for r in rows if r["method"] == method)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=method)
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title("weakly-supervised localization")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def build_tables(ledger_path: str | Path, out_dir: str | Path,
                 localization_csvs: list[str | Path] | None = None) -> dict[str, Path]:
    """Build every report artifact under ``out_dir``.  An empty or missing
    ledger still produces a (stub) report and returns normally."""
    # read every input before writing anything, so a bad path cannot leave
    # a half-built report behind
    rows = build_table_rows(read_ledger(ledger_path))
    loc_rows = read_localization_csvs([Path(p) for p in (localization_csvs or [])])

    out = Path(out_dir)
    tables_dir = out / "tables"
    plots_dir = out / "plots"
    tables_dir.mkdir(parents=True, exist_ok=True)
    plots_dir.mkdir(parents=True, exist_ok=True)

    written: dict[str, Path] = {}
    md_sections: list[str] = ["# Experiment report", ""]

    task_metrics = sorted({(r.task, r.metric) for r in rows})
    if not task_metrics:
        md_sections.append("No fine-tuning results in the ledger yet.")
    for task, metric in task_metrics:
        sub = [r for r in rows if r.task == task and r.metric == metric]
        stem = f"{task}_{metric}"
        _write_table_csv(tables_dir / f"{stem}.csv", sub)
        _write_table_md(tables_dir / f"{stem}.md", sub, f"{task} ({metric})")
        _plot_fraction_curves(plots_dir / f"{stem}.png", sub, f"{task} ({metric})")
        written[f"table:{stem}"] = tables_dir / f"{stem}.csv"
        written[f"plot:{stem}"] = plots_dir / f"{stem}.png"
        md_sections.append(f"## {task} ({metric})")
        md_sections.append("")
        md_sections.append((tables_dir / f"{stem}.md").read_text(encoding="utf-8")
                           .split("\n", 2)[2])
        md_sections.append(f"![{stem}](plots/{stem}.png)")
        md_sections.append("")

    if loc_rows:
        loc_csv = tables_dir / "localization.csv"
        lines = [",".join(("method", "delta", "correct", "total", "accuracy"))]
        for r in loc_rows:
            lines.append(",".join([r["method"], format(r["delta"], ".10g"), str(r["correct"]),
                                   str(r["total"]), format(r["accuracy"], ".10g")]))
        loc_csv.write_text("\n".join(lines) + "\n", encoding="utf-8")
        _plot_localization(plots_dir / "localization.png", loc_rows)
        written["table:localization"] = loc_csv
        written["plot:localization"] = plots_dir / "localization.png"
        md_sections.append("## Localization")
        md_sections.append("")
        md_sections.append("| method | delta | correct | total | accuracy |")
        md_sections.append("|---|---|---|---|---|")
        for r in loc_rows:
            md_sections.append(f"| {r['method']} | {r['delta']:.10g} | {r['correct']} "
                               f"| {r['total']} | {r['accuracy']:.10g} |")
        md_sections.append("")
        md_sections.append("![localization](plots/localization.png)")
        md_sections.append("")

    report_md = out / "report.md"
    report_md.write_text("\n".join(md_sections) + "\n", encoding="utf-8")
    written["report"] = report_md
    return written
