"""Metrics and reports over prediction records.

Macro-F1 is the unweighted mean of per-class F1 over the classes present in
the gold labels; invalid predictions (None) count against their gold class
and never toward any predicted class. Every report artifact is sorted and
timestamp-free so identical inputs produce identical bytes.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .corpus import LabelSpace
from .errors import DataError
from .pipeline import STRATEGIES, PredictionRecord

log = logging.getLogger(__name__)

REPORT_SCHEMA = "cicle-report/v1"

# size bands: low 100-400, medium 500-2000, large 3000-5000
REGIME_BOUNDS = {"low": (1, 400), "medium": (401, 2000), "large": (2001, None)}

CellKey = tuple[str, int, str]


@dataclass(frozen=True)
class CellMetrics:
    macro_f1: float
    mean_token_count: float
    mean_shot_count: float
    bypass_rate: float
    invalid_rate: float
    empirical_coverage: float | None
    n_records: int


@dataclass
class RunReport:
    per_cell: dict[CellKey, CellMetrics]
    aggregates: dict[tuple[str, str], float]
    regimes: dict[tuple[str, str], float]
    reductions: dict[str, dict[str, float]]
    schema: str = REPORT_SCHEMA


def _class_count(labels) -> int:
    if isinstance(labels, LabelSpace):
        return len(labels)
    n = int(labels)
    if n < 1:
        raise ValueError(f"class count must be >= 1, got {n}")
    return n


def macro_f1(preds: Sequence[int | None], golds: Sequence[int], labels) -> float:
    """Unweighted mean per-class F1 over the classes present in golds.

    ``labels`` is a LabelSpace or a plain class count. A None prediction is a
    false negative for its gold class and a positive for no class; a class
    with no true positives scores 0.
    """
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions for {len(golds)} golds")
    if not golds:
        raise ValueError("cannot compute macro-F1 on empty input")
    n = _class_count(labels)
    tp = [0] * n
    fp = [0] * n
    fn = [0] * n
    for p, g in zip(preds, golds):
        if not (0 <= g < n):
            raise ValueError(f"gold label {g} outside the {n}-class label space")
        if p is not None and not (0 <= p < n):
            raise ValueError(f"predicted label {p} outside the {n}-class label space")
        if p == g:
            tp[g] += 1
        else:
            fn[g] += 1
            if p is not None:
                fp[p] += 1
    scores = []
    for c in sorted(set(golds)):
        denom = 2 * tp[c] + fp[c] + fn[c]
        scores.append(0.0 if denom == 0 else 2 * tp[c] / denom)
    return sum(scores) / len(scores)


def cell_metrics(records: Sequence[PredictionRecord], labels) -> CellMetrics:
    """Aggregate one cell's records.

    Records without a prompt (base strategy, conformal bypasses) contribute
    zero tokens and zero shots to the means: that is exactly the saving the
    gating is supposed to buy. Coverage averages over records that carry a
    conformal set and is None when none do.
    """
    if not records:
        raise ValueError("cannot compute metrics for an empty cell")
    n = len(records)
    f1 = macro_f1([r.final_label for r in records], [r.gold_label for r in records], labels)
    tokens = sum(r.prompt_stats.token_count for r in records if r.prompt_stats is not None)
    shots = sum(r.prompt_stats.shot_count for r in records if r.prompt_stats is not None)
    covered = [1.0 if r.conformal_set.contains(r.gold_label) else 0.0
               for r in records if r.conformal_set is not None]
    return CellMetrics(
        macro_f1=f1,
        mean_token_count=tokens / n,
        mean_shot_count=shots / n,
        bypass_rate=sum(1 for r in records if r.bypassed) / n,
        invalid_rate=sum(1 for r in records if r.final_label is None) / n,
        empirical_coverage=sum(covered) / len(covered) if covered else None,
        n_records=n,
    )


def aggregate_all_sizes(per_cell: Mapping[CellKey, CellMetrics], dataset: str,
                        sizes: Sequence[int], strategies: Sequence[str],
                        ) -> dict[str, float]:
    """Per-strategy mean macro-F1 over the given sizes; a missing cell is an error."""
    if not sizes:
        raise ValueError(f"no sizes to aggregate for dataset {dataset!r}")
    out: dict[str, float] = {}
    for strategy in strategies:
        values = []
        for size in sizes:
            key = (dataset, size, strategy)
            if key not in per_cell:
                raise DataError(f"missing cell {dataset}/{size}/{strategy}")
            values.append(per_cell[key].macro_f1)
        out[strategy] = sum(values) / len(values)
    return out


def regime_aggregate(per_cell: Mapping[CellKey, CellMetrics],
                     regimes: Mapping[str, Sequence[int]], datasets: Sequence[str],
                     strategies: Sequence[str]) -> dict[tuple[str, str], float]:
    """Mean macro-F1 per (regime, strategy) over datasets x regime sizes."""
    out: dict[tuple[str, str], float] = {}
    for regime, sizes in regimes.items():
        if not sizes or not datasets:
            raise ValueError(f"regime {regime!r} is empty")
        for strategy in strategies:
            values = []
            for dataset in datasets:
                for size in sizes:
                    key = (dataset, size, strategy)
                    if key not in per_cell:
                        raise DataError(f"missing cell {dataset}/{size}/{strategy}"
                                        f" for regime {regime!r}")
                    values.append(per_cell[key].macro_f1)
            out[(regime, strategy)] = sum(values) / len(values)
    return out


def regimes_for(sizes: Sequence[int]) -> dict[str, list[int]]:
    """Partition the configured sizes into the low/medium/large bands."""
    out: dict[str, list[int]] = {}
    for name, (lo, hi) in REGIME_BOUNDS.items():
        members = [s for s in sizes if s >= lo and (hi is None or s <= hi)]
        if members:
            out[name] = members
    return out


def reduction_stats(cicle_cells: Sequence[CellMetrics],
                    baseline_cells: Mapping[str, Sequence[CellMetrics]],
                    ) -> dict[str, float]:
    """Prompt-token and shot-count reduction of the conformal route, in percent.

    Both reductions compare the all-size conformal mean with the average of
    the per-baseline all-size means; negative values mean the conformal
    prompts were larger.
    """
    if not cicle_cells:
        raise ValueError("no conformal cells to compare")
    if not baseline_cells or any(not cells for cells in baseline_cells.values()):
        raise ValueError("every baseline needs at least one cell")

    def mean(values):
        values = list(values)
        return sum(values) / len(values)

    out = {}
    for field, name in (("mean_token_count", "prompt_reduction_pct"),
                        ("mean_shot_count", "shot_reduction_pct")):
        cicle_mean = mean(getattr(c, field) for c in cicle_cells)
        baseline_mean = mean(mean(getattr(c, field) for c in cells)
                             for cells in baseline_cells.values())
        if baseline_mean == 0:
            raise ValueError(f"baseline {field} mean is zero; reduction undefined")
        out[name] = 100.0 * (1.0 - cicle_mean / baseline_mean)
    return out


def _strategy_order(strategies) -> list[str]:
    return sorted(strategies, key=lambda s: (STRATEGIES.index(s) if s in STRATEGIES else
                                             len(STRATEGIES), s))


def build_report(cells: Mapping[CellKey, Sequence[PredictionRecord]],
                 class_counts: Mapping[str, int],
                 regimes: Mapping[str, Sequence[int]] | None = None) -> RunReport:
    """Metrics, learning-curve aggregates, regime means and reductions.

    ``cells`` maps (dataset, size, strategy) to that cell's records;
    ``class_counts`` gives the label-space size per dataset. Regime means
    cover the datasets holding every size of the regime; regimes no dataset
    fully covers are dropped with a warning. Reductions are emitted per
    dataset whenever the conformal strategy and at least one few-shot
    baseline are present.
    """
    if not cells:
        raise ValueError("no cells to report")
    per_cell: dict[CellKey, CellMetrics] = {}
    for key in sorted(cells):
        dataset = key[0]
        if dataset not in class_counts:
            raise DataError(f"no class count supplied for dataset {dataset!r}")
        per_cell[key] = cell_metrics(cells[key], class_counts[dataset])

    datasets = sorted({d for d, _, _ in per_cell})
    strategies = _strategy_order({s for _, _, s in per_cell})
    sizes_by_dataset = {d: sorted({s for dd, s, _ in per_cell if dd == d}) for d in datasets}

    aggregates: dict[tuple[str, str], float] = {}
    for dataset in datasets:
        means = aggregate_all_sizes(per_cell, dataset, sizes_by_dataset[dataset], strategies)
        for strategy, value in means.items():
            aggregates[(dataset, strategy)] = value

    all_sizes = sorted({s for _, s, _ in per_cell})
    regimes = regimes if regimes is not None else regimes_for(all_sizes)
    regime_means: dict[tuple[str, str], float] = {}
    for regime, sizes in regimes.items():
        covered = [d for d in datasets if set(sizes) <= set(sizes_by_dataset[d])]
        if not covered:
            log.warning("regime %r has no dataset with all of sizes %s; dropping it",
                        regime, list(sizes))
            continue
        regime_means.update(regime_aggregate(per_cell, {regime: list(sizes)}, covered,
                                             strategies))

    reductions: dict[str, dict[str, float]] = {}
    baselines_present = [s for s in strategies if s.startswith("fewshot-")]
    if "cicle" in strategies and baselines_present:
        for dataset in datasets:
            sizes = sizes_by_dataset[dataset]
            cicle_cells = [per_cell[(dataset, size, "cicle")] for size in sizes]
            baselines = {s: [per_cell[(dataset, size, s)] for size in sizes]
                         for s in baselines_present}
            reductions[dataset] = reduction_stats(cicle_cells, baselines)

    return RunReport(per_cell=per_cell, aggregates=aggregates, regimes=regime_means,
                     reductions=reductions)


def _metrics_to_json(m: CellMetrics) -> dict:
    return {
        "macro_f1": m.macro_f1,
        "mean_token_count": m.mean_token_count,
        "mean_shot_count": m.mean_shot_count,
        "bypass_rate": m.bypass_rate,
        "invalid_rate": m.invalid_rate,
        "empirical_coverage": m.empirical_coverage,
        "n_records": m.n_records,
    }


def report_to_json(report: RunReport) -> dict:
    return {
        "schema": report.schema,
        "per_cell": {f"{d}/{s}/{strat}": _metrics_to_json(m)
                     for (d, s, strat), m in sorted(report.per_cell.items())},
        "aggregates": {f"{d}/{strat}": v for (d, strat), v in sorted(report.aggregates.items())},
        "regimes": {f"{r}/{strat}": v for (r, strat), v in sorted(report.regimes.items())},
        "reductions": {d: dict(sorted(v.items())) for d, v in sorted(report.reductions.items())},
    }


def report_from_json(obj: Mapping) -> RunReport:
    try:
        if obj["schema"] != REPORT_SCHEMA:
            raise DataError(f"unsupported report schema {obj['schema']!r}")
        per_cell = {}
        for key, raw in obj["per_cell"].items():
            dataset, size, strategy = key.split("/")
            cov = raw["empirical_coverage"]
            per_cell[(dataset, int(size), strategy)] = CellMetrics(
                macro_f1=float(raw["macro_f1"]),
                mean_token_count=float(raw["mean_token_count"]),
                mean_shot_count=float(raw["mean_shot_count"]),
                bypass_rate=float(raw["bypass_rate"]),
                invalid_rate=float(raw["invalid_rate"]),
                empirical_coverage=None if cov is None else float(cov),
                n_records=int(raw["n_records"]),
            )
        aggregates = {}
        for key, value in obj["aggregates"].items():
            dataset, strategy = key.split("/")
            aggregates[(dataset, strategy)] = float(value)
        regimes = {}
        for key, value in obj["regimes"].items():
            regime, strategy = key.split("/")
            regimes[(regime, strategy)] = float(value)
        reductions = {d: {k: float(v) for k, v in inner.items()}
                      for d, inner in obj["reductions"].items()}
        return RunReport(per_cell=per_cell, aggregates=aggregates, regimes=regimes,
                         reductions=reductions, schema=str(obj["schema"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"malformed report JSON: {exc}") from None


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def emit_report(report: RunReport, out_dir, formats: Sequence[str] = ("csv", "json")) -> list[Path]:
    """Write report.json plus plot-ready CSVs; byte-identical for equal reports.

    cells.csv has one row per (dataset, size, strategy); curve_{dataset}.csv
    is wide (one size per row, one macro-F1 column per strategy) for direct
    plotting.
    """
    unknown = [f for f in formats if f not in ("csv", "json")]
    if unknown:
        raise ValueError(f"unknown report formats: {', '.join(unknown)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    if "json" in formats:
        path = out_dir / "report.json"
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            json.dump(report_to_json(report), fh, indent=2, sort_keys=True, ensure_ascii=False)
            fh.write("\n")
        written.append(path)

    if "csv" not in formats:
        return written

    keys = sorted(report.per_cell)
    path = out_dir / "cells.csv"
    _write_csv(path,
               ["dataset", "size", "strategy", "n_records", "macro_f1", "mean_token_count",
                "mean_shot_count", "bypass_rate", "invalid_rate", "empirical_coverage"],
               [[d, s, strat, m.n_records, m.macro_f1, m.mean_token_count, m.mean_shot_count,
                 m.bypass_rate, m.invalid_rate, m.empirical_coverage]
                for (d, s, strat), m in ((k, report.per_cell[k]) for k in keys)])
    written.append(path)

    datasets = sorted({d for d, _, _ in keys})
    strategies = _strategy_order({s for _, _, s in keys})
    for dataset in datasets:
        sizes = sorted({s for d, s, _ in keys if d == dataset})
        rows = []
        for size in sizes:
            row = [size]
            for strategy in strategies:
                m = report.per_cell.get((dataset, size, strategy))
                row.append(None if m is None else m.macro_f1)
            rows.append(row)
        path = out_dir / f"curve_{dataset}.csv"
        _write_csv(path, ["size"] + list(strategies), rows)
        written.append(path)

    path = out_dir / "aggregates.csv"
    _write_csv(path, ["dataset", "strategy", "macro_f1"],
               [[d, s, v] for (d, s), v in sorted(report.aggregates.items())])
    written.append(path)

    if report.regimes:
        path = out_dir / "regimes.csv"
        _write_csv(path, ["regime", "strategy", "macro_f1"],
                   [[r, s, v] for (r, s), v in sorted(report.regimes.items())])
        written.append(path)

    if report.reductions:
        path = out_dir / "reductions.csv"
        _write_csv(path, ["dataset", "prompt_reduction_pct", "shot_reduction_pct"],
                   [[d, v["prompt_reduction_pct"], v["shot_reduction_pct"]]
                    for d, v in sorted(report.reductions.items())])
        written.append(path)
    return written
