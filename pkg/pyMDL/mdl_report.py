"""
Reports over a ResultsTable.

The summary table has one block per (architecture, domain set) with a row
per sharing strategy at a single budget fraction, followed by the
independent-model reference. The best strategy per domain is flagged in
``best:<domain>`` columns. Accuracy-versus-fraction curves get one line per
strategy plus the independent reference, one plot per domain.
"""

from __future__ import annotations

import json
import logging
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import matplotlib
import numpy as np
import pandas as pd
from scipy import stats

from pyMDL.mdl_bench import INDEPENDENT, ResultsTable, write_results
from pyMDL.mdl_trainer import MetricsHistory

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = [
    "STRATEGY_ORDER",
    "REPORT_FORMATS",
    "ReportArtifacts",
    "select_fraction",
    "aggregate",
    "independent_reference",
    "summary_frame",
    "directional_gap",
    "independent_gap",
    "competitive_fraction",
    "plot_accuracy_curves",
    "plot_cell_training_curves",
    "plot_training_curves",
    "emit_report",
]

logger = logging.getLogger(__name__)

STRATEGY_ORDER = ("top_specific", "random", "bottom_specific")

# Strategy whose fraction-1.0 rows stand in for independent models, by preference.
REFERENCE_PRIORITY = ("bottom_specific", "top_specific", "random")

REPORT_FORMATS = {"csv": ",", "tsv": "\t"}

_BLOCK = ["architecture", "domain_set"]


@dataclass
class ReportArtifacts:
    results_path: Path
    table_path: Path
    findings_path: Path
    frame: pd.DataFrame
    findings: dict
    plot_paths: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)


def _frame(table) -> pd.DataFrame:
    return table.to_frame() if isinstance(table, ResultsTable) else table


def select_fraction(table, fraction: float | None = None, preferred: float | None = None):
    """
    Pick the budget fraction the summary table reports.

    An explicit ``fraction`` must be present in the table. Otherwise the
    ``preferred`` fraction (a config's ``report_fraction``) when present, then
    0.2, then the smallest fraction strictly between 0 and 1, then the
    smallest fraction. Returns None for a table with no strategy rows.
    """
    frame = _frame(table)
    fractions = sorted(set(frame.loc[frame.strategy != INDEPENDENT, "fraction"].astype(float)))
    if not fractions:
        return None

    def present(value):
        return next((f for f in fractions if math.isclose(f, value)), None)

    if fraction is not None:
        found = present(fraction)
        if found is None:
            raise ValueError(f"Fraction {fraction} is not in the results (have {fractions})")
        return found
    for candidate in (preferred, 0.2):
        if candidate is not None and present(candidate) is not None:
            return present(candidate)
    inner = [f for f in fractions if 0 < f < 1]
    return inner[0] if inner else fractions[0]


def _sem(values):
    if len(values) < 2:
        return float("nan")
    return float(stats.sem(values))


def aggregate(table) -> pd.DataFrame:
    """
    Seed-aggregated accuracy per (architecture, domain set, strategy, fraction, domain).

    Columns ``accuracy_mean``, ``accuracy_sem`` (NaN for a single seed),
    ``n_seeds``, ``params_total_mean``, ``params_specific_mean`` and
    ``params_total_seeds`` (the distinct per-seed totals, ``;``-joined).
    """
    frame = _frame(table)
    keys = [*_BLOCK, "strategy", "fraction", "domain"]
    grouped = frame.groupby(keys, sort=False)
    return grouped.agg(
        accuracy_mean=("val_accuracy", "mean"),
        accuracy_sem=("val_accuracy", _sem),
        n_seeds=("seed", "nunique"),
        params_total_mean=("params_total", "mean"),
        params_specific_mean=("params_specific", "mean"),
        params_total_seeds=("params_total", lambda s: ";".join(str(v) for v in dict.fromkeys(s))),
    ).reset_index()


def independent_reference(means: pd.DataFrame) -> pd.DataFrame:
    """
    Per-domain independent-model accuracy of every block.

    Literal ``independent`` rows win; otherwise the fraction-1.0 rows of the
    first strategy in ``REFERENCE_PRIORITY`` that has them.
    """
    parts = []
    for _, block in means.groupby(_BLOCK, sort=False):
        literal = block[block.strategy == INDEPENDENT]
        if len(literal):
            parts.append(literal)
            continue
        full = block[np.isclose(block.fraction.astype(float), 1.0)]
        for strategy in REFERENCE_PRIORITY:
            rows = full[full.strategy == strategy]
            if len(rows):
                parts.append(rows)
                break
    if not parts:
        return means.iloc[0:0].copy()
    return pd.concat(parts, ignore_index=True).assign(strategy=INDEPENDENT)


def _domains(frame) -> list[str]:
    return list(dict.fromkeys(frame["domain"]))


def summary_frame(
    table, fraction: float | None = None, preferred: float | None = None
) -> pd.DataFrame:
    """
    Summary table: one row per strategy at the report fraction plus the
    independent row, grouped by architecture and domain set.

    Accuracies are formatted to four decimals (``"-"`` when a domain has no
    value in that row) and ``params_m`` to two decimals of millions.
    """
    frame = _frame(table)
    if frame.empty:
        raise ValueError("Cannot report an empty results table")
    means = aggregate(frame)
    domains = _domains(frame)
    chosen = select_fraction(frame, fraction, preferred)

    strategy_rows = means[means.strategy != INDEPENDENT]
    if chosen is not None:
        strategy_rows = strategy_rows[np.isclose(strategy_rows.fraction.astype(float), chosen)]
    else:
        strategy_rows = strategy_rows.iloc[0:0]
    reference = independent_reference(means)
    if chosen is not None and math.isclose(chosen, 1.0):
        # the strategy rows already are the fraction-1.0 models
        literal = means.loc[means.strategy == INDEPENDENT, _BLOCK].drop_duplicates()
        reference = reference.merge(literal, on=_BLOCK)

    records = []
    for block_key, block in pd.concat([strategy_rows, reference]).groupby(_BLOCK, sort=False):
        present = [s for s in (*STRATEGY_ORDER, INDEPENDENT) if s in set(block.strategy)]
        present += [s for s in dict.fromkeys(block.strategy) if s not in present]
        candidates = block[block.strategy != INDEPENDENT]
        best = candidates.groupby("domain").accuracy_mean.max()
        for strategy in present:
            rows = block[block.strategy == strategy].set_index("domain")
            params = rows.params_total_mean.mean()
            record = {
                "architecture": block_key[0],
                "domain_set": block_key[1],
                "params_m": f"{params / 1e6:.2f}",
                "params_total": int(round(params)),
                "strategy": strategy,
            }
            for domain in domains:
                record[domain] = (
                    f"{rows.accuracy_mean[domain]:.4f}" if domain in rows.index else "-"
                )
            for domain in domains:
                record[f"best:{domain}"] = bool(
                    strategy != INDEPENDENT
                    and domain in rows.index
                    and np.isclose(rows.accuracy_mean[domain], best[domain])
                )
            record["n_seeds"] = int(rows.n_seeds.max())
            record["params_total_seeds"] = ";".join(
                dict.fromkeys(";".join(rows.params_total_seeds).split(";"))
            )
            records.append(record)
    return pd.DataFrame.from_records(records)


################################################################################


def _pairs(means: pd.DataFrame) -> pd.DataFrame | None:
    subset = means[means.strategy.isin(["bottom_specific", "top_specific"])]
    if set(subset.strategy) != {"bottom_specific", "top_specific"}:
        return None
    wide = subset.pivot_table(
        index=[*_BLOCK, "fraction", "domain"],
        columns="strategy",
        values="accuracy_mean",
        sort=False,
    )
    return wide[["bottom_specific", "top_specific"]].dropna()


def directional_gap(table) -> pd.DataFrame:
    """
    bottom_specific minus top_specific accuracy per fraction.

    Columns ``mean_gap``, ``n_domains``, ``p_value`` (paired t-test over
    domains, NaN below two domains) and one ``gap:<domain>`` column per
    domain. The sign is reported, never enforced.
    """
    frame = _frame(table)
    pairs = _pairs(aggregate(frame))
    columns = [*_BLOCK, "fraction", "mean_gap", "n_domains", "p_value"]
    if pairs is None or pairs.empty:
        return pd.DataFrame(columns=columns)
    records = []
    for (arch, domain_set, fraction), group in pairs.groupby(level=[0, 1, 2], sort=False):
        group = group.droplevel([0, 1, 2])
        gaps = group.bottom_specific - group.top_specific
        p_value = float("nan")
        if len(group) >= 2:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                p_value = float(stats.ttest_rel(group.bottom_specific, group.top_specific).pvalue)
        record = {
            "architecture": arch,
            "domain_set": domain_set,
            "fraction": float(fraction),
            "mean_gap": float(gaps.mean()),
            "n_domains": len(group),
            "p_value": p_value,
        }
        record.update({f"gap:{d}": float(v) for d, v in gaps.items()})
        records.append(record)
    result = pd.DataFrame.from_records(records)
    if len(result):
        result = result.sort_values([*_BLOCK, "fraction"], kind="stable", ignore_index=True)
    return result


def _reference_gaps(means: pd.DataFrame) -> pd.DataFrame:
    reference = independent_reference(means)[[*_BLOCK, "domain", "accuracy_mean"]]
    strategies = means[means.strategy != INDEPENDENT]
    joined = strategies.merge(reference, on=[*_BLOCK, "domain"], suffixes=("", "_independent"))
    return joined.assign(gap=joined.accuracy_mean - joined.accuracy_mean_independent)


def independent_gap(table) -> pd.DataFrame:
    """Each strategy's accuracy minus the independent reference, per fraction."""
    gaps = _reference_gaps(aggregate(_frame(table)))
    summary = gaps.groupby([*_BLOCK, "strategy", "fraction"], sort=False).agg(
        mean_gap=("gap", "mean"),
        min_gap=("gap", "min"),
        n_domains=("domain", "nunique"),
    )
    return summary.reset_index().sort_values(
        [*_BLOCK, "strategy", "fraction"], kind="stable", ignore_index=True
    )


def competitive_fraction(
    table, strategy: str = "bottom_specific", tolerance: float = 0.01
) -> pd.DataFrame:
    """
    Smallest fraction at which ``strategy`` is within ``tolerance`` of the
    independent reference on every domain of a block (None if never).
    """
    gaps = _reference_gaps(aggregate(_frame(table)))
    gaps = gaps[gaps.strategy == strategy]
    records = []
    for (arch, domain_set), block in gaps.groupby(_BLOCK, sort=False):
        ok = block.groupby("fraction").gap.min() >= -tolerance
        passing = sorted(float(f) for f in ok.index[ok.to_numpy()])
        records.append(
            {
                "architecture": arch,
                "domain_set": domain_set,
                "strategy": strategy,
                "tolerance": tolerance,
                "fraction": passing[0] if passing else None,
            }
        )
    return pd.DataFrame.from_records(
        records, columns=[*_BLOCK, "strategy", "tolerance", "fraction"]
    )


################################################################################


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_\-]+", "_", str(text)).strip("_") or "x"


def plot_accuracy_curves(table, out_dir: str | Path) -> tuple[list[Path], dict]:
    """
    Validation accuracy versus domain-specific fraction, one plot per domain.

    Returns the written paths and, per path, the plotted lines as
    ``label -> [(fraction, accuracy), ...]``; the independent reference is a
    horizontal line stored as a single point at fraction 1.0.
    """
    frame = _frame(table)
    means = aggregate(frame)
    reference = independent_reference(means)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    several_sets = means.groupby("architecture").domain_set.nunique().max() > 1

    paths, curves = [], {}
    for (arch, domain_set, domain), rows in means.groupby([*_BLOCK, "domain"], sort=False):
        lines = {}
        ordered = [s for s in STRATEGY_ORDER if s in set(rows.strategy)]
        ordered += [s for s in dict.fromkeys(rows.strategy) if s not in ordered and s != INDEPENDENT]
        for strategy in ordered:
            points = rows[rows.strategy == strategy].sort_values("fraction")
            lines[strategy] = list(zip(points.fraction.astype(float), points.accuracy_mean))
        ref = reference[
            (reference.architecture == arch)
            & (reference.domain_set == domain_set)
            & (reference.domain == domain)
        ]
        if len(ref):
            lines[INDEPENDENT] = [(1.0, float(ref.accuracy_mean.iloc[0]))]

        fig, ax = plt.subplots(figsize=(6, 4))
        for label, points in lines.items():
            if label == INDEPENDENT:
                ax.axhline(points[0][1], color="black", linestyle="--", label=label)
            else:
                xs, ys = zip(*points)
                ax.plot(xs, ys, marker="o", label=label)
        ax.set_xlabel("domain-specific fraction")
        ax.set_ylabel("validation accuracy")
        ax.set_title(f"{arch}: {domain}")
        ax.legend()
        ax.grid(True, alpha=0.3)
        parts = [arch, domain_set, domain] if several_sets else [arch, domain]
        path = out_dir / f"curve_{'_'.join(_slug(p) for p in parts)}.png"
        plt.tight_layout()
        plt.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
        curves[path.name] = lines
    return paths, curves


def plot_training_curves(
    histories: Mapping[str, MetricsHistory],
    domain_id: str,
    path: str | Path,
    split: str = "val",
    metric: str = "accuracy",
) -> Path:
    """
    Draw ``metric`` against training round for one domain, one line per history.

    ``histories`` maps a line label (typically a strategy) to the history of
    a cell trained at the budget being compared.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, history in histories.items():
        series = history.series(domain_id, split, metric)
        if not series:
            logger.warning("History %r has no %s %s for %s", label, split, metric, domain_id)
            continue
        rounds, values = zip(*series)
        ax.plot(rounds, values, label=label)
    ax.set_xlabel("round")
    ax.set_ylabel(f"{split} {metric}")
    ax.set_title(domain_id)
    ax.legend()
    plt.tight_layout()
    plt.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_cell_training_curves(table: ResultsTable, fraction: float, out_dir: str | Path) -> list[Path]:
    """
    Training curves of the cells trained at ``fraction``, one plot per domain.

    Lines are strategies; with several seeds the first seed of a strategy is
    drawn. Tables without histories (read back from a file) give no plots.
    """
    blocks: dict = {}
    for index in sorted(table.histories):
        cell = table.cells.get(index)
        if cell is None or not math.isclose(float(cell["fraction"]), fraction):
            continue
        key = (cell["architecture"], tuple(cell["domain_set"]))
        blocks.setdefault(key, {}).setdefault(cell["strategy"], table.histories[index])

    out_dir = Path(out_dir)
    paths = []
    for (arch, domain_set), histories in blocks.items():
        for domain_id in domain_set:
            name = "_".join(_slug(p) for p in (arch, "+".join(domain_set), domain_id))
            paths.append(plot_training_curves(histories, domain_id, out_dir / f"training_{name}.png"))
    return paths


################################################################################


def _records(frame: pd.DataFrame) -> list[dict]:
    return json.loads(frame.to_json(orient="records"))


def emit_report(
    table: ResultsTable,
    out_dir: str | Path,
    format: str = "csv",
    fraction: float | None = None,
    preferred: float | None = None,
    plots: bool = True,
    tolerance: float = 0.01,
) -> ReportArtifacts:
    """
    Write the results, the summary table, findings and curve plots.

    Parameters
    ----------
    table : ResultsTable
        Non-empty results.
    out_dir : str or Path
    format : {"csv", "tsv"}
        Delimiter of the results and summary files.
    fraction, preferred : float, optional
        See :func:`select_fraction`.
    plots : bool
        Draw the accuracy-versus-fraction curves and, for tables that carry
        histories, the training curves at the report fraction.
    tolerance : float
        Accuracy tolerance of :func:`competitive_fraction`.

    Returns
    -------
    artifacts : ReportArtifacts

    Example
    -------
    ::

        >>> table = read_results("results.csv")  # doctest: +SKIP
        >>> emit_report(table, "report").frame[["strategy", "params_m"]]  # doctest: +SKIP

    """
    if format not in REPORT_FORMATS:
        raise ValueError('Invalid value for "format": {}'.format(format))
    if not len(table):
        raise ValueError("Cannot report an empty results table")
    sep = REPORT_FORMATS[format]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    results_path = write_results(table, out_dir / f"results.{format}", sep=sep)
    frame = summary_frame(table, fraction, preferred)
    table_path = out_dir / f"summary.{format}"
    frame.to_csv(table_path, sep=sep, index=False, lineterminator="\n")

    gap = directional_gap(table)
    findings = {
        "fraction": select_fraction(table, fraction, preferred),
        "directional_gap": _records(gap),
        "independent_gap": _records(independent_gap(table)),
        "competitive_fraction": _records(competitive_fraction(table, tolerance=tolerance)),
        "failures": [
            {"index": f.index, "cell": f.cell, "error": f.error} for f in table.failures
        ],
    }
    findings_path = out_dir / "findings.json"
    findings_path.write_text(json.dumps(findings, indent=2, sort_keys=True, default=list) + "\n")
    for row in gap.itertuples(index=False):
        logger.info(
            "%s [%s] fraction %g: bottom - top = %+.4f over %d domain(s), p = %.3g",
            row.architecture,
            row.domain_set,
            row.fraction,
            row.mean_gap,
            row.n_domains,
            row.p_value,
        )

    plot_paths, curves = [], {}
    if plots:
        plot_paths, curves = plot_accuracy_curves(table, out_dir)
        if findings["fraction"] is not None:
            plot_paths += plot_cell_training_curves(table, findings["fraction"], out_dir / "training")
    return ReportArtifacts(
        results_path=results_path,
        table_path=table_path,
        findings_path=findings_path,
        frame=frame,
        findings=findings,
        plot_paths=plot_paths,
        curves=curves,
    )
