"""
Business logic - Report Service
================================
Builds the report tables shared by the CLI, the Excel exporter and the
dashboard:

- experiment tables: learner x {mono npm, mono pypi, cross npm, cross pypi}
  with "mean ± std" cells for precision, recall, F1 and accuracy;
- scan summaries from sink records: verdict counts per ecosystem, flagged
  counts per model and ecosystem, daily rollups and the flagged-package list.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import pandas as pd

from data.processors import model_results_frame, verdict_frame
from models.params import LearnerKind, coerce_kind
from service.dataset_service import Dataset
from service.tuning_service import CVConfig, MetricScores, MetricsReport, MetricSummary, cross_validate

logger = logging.getLogger(__name__)

MONO = "mono"
CROSS = "cross"
METRICS = MetricScores._fields
EXPERIMENT_COLUMNS = ("learner", "setting", "metric", "mean", "std")
COUNT_COLUMNS = ("ecosystem", "scanned", "benign", "flagged", "errors")
MODEL_SUMMARY_COLUMNS = ("model_id", "ecosystem", "classified", "flagged", "flagged_only_by_model", "flag_rate")
DAILY_COLUMNS = ("date", "ecosystem", "scanned", "flagged", "errors")
FLAGGED_COLUMNS = ("ecosystem", "name", "version", "max_probability", "flagged_by", "top_features", "scanned_at")


@dataclass(frozen=True)
class ExperimentRow:
    learner: LearnerKind
    setting: str
    report: MetricsReport

    def as_dict(self) -> dict:
        return {"learner": self.learner.value, "setting": self.setting, **self.report.as_dict()}


# ---------------------------------------------------------------------------
# Internal helpers
# ---------------------------------------------------------------------------

def _setting(mode: str, ecosystem: str) -> str:
    return f"{mode} {ecosystem}"


def _present_ecosystems(dataset: Dataset) -> list[str]:
    return sorted(set(dataset.ecosystems().tolist()))


# ---------------------------------------------------------------------------
# Controlled experiments
# ---------------------------------------------------------------------------

def run_experiment_grid(
        dataset: Dataset,
        learners: Sequence = tuple(LearnerKind),
        hyperparams: Mapping | None = None,
        cv: CVConfig | None = None,
        progress=None,
) -> list[ExperimentRow]:
    """
    Cross-validate every learner on each ecosystem slice (mono) and, when the
    dataset holds both ecosystems, on the merged data scored per ecosystem
    (cross).

    ``hyperparams`` maps a learner kind to its hyperparameters; missing kinds
    use the defaults. ``progress`` is called once per finished cell.
    """
    hyperparams = {coerce_kind(k): v for k, v in (hyperparams or {}).items()}
    ecosystems = _present_ecosystems(dataset)
    rows = []
    for learner in (coerce_kind(k) for k in learners):
        hp = hyperparams.get(learner)
        for ecosystem in ecosystems:
            report = cross_validate(dataset.filter(ecosystem), learner, hp, cv)
            rows.append(ExperimentRow(learner, _setting(MONO, ecosystem), report))
            if progress:
                progress(rows[-1])
        if len(ecosystems) > 1:
            for ecosystem in ecosystems:
                report = cross_validate(dataset, learner, hp, cv, eval_ecosystem=ecosystem)
                rows.append(ExperimentRow(learner, _setting(CROSS, ecosystem), report))
                if progress:
                    progress(rows[-1])
    return rows


def experiment_frame(rows: Iterable[ExperimentRow]) -> pd.DataFrame:
    """Long numeric table: one row per (learner, setting, metric)."""
    records = [
        {
            "learner": row.learner.value,
            "setting": row.setting,
            "metric": metric,
            "mean": getattr(row.report, metric).mean,
            "std": getattr(row.report, metric).std,
        }
        for row in rows
        for metric in METRICS
    ]
    return pd.DataFrame(records, columns=list(EXPERIMENT_COLUMNS))


def experiment_table(rows: Iterable[ExperimentRow]) -> pd.DataFrame:
    """
    Wide table with one row per learner and one "mean ± std" column (percent)
    per setting and metric.
    """
    rows = list(rows)
    if not rows:
        return pd.DataFrame(columns=["learner"])

    settings = list(dict.fromkeys(row.setting for row in rows))
    table = {}
    for row in rows:
        line = table.setdefault(row.learner.value, {"learner": row.learner.value})
        for metric in METRICS:
            line[f"{row.setting} {metric}"] = getattr(row.report, metric).formatted()

    columns = ["learner"] + [f"{s} {m}" for s in settings for m in METRICS]
    return pd.DataFrame(list(table.values())).reindex(columns=columns)


def experiments_document(rows: Iterable[ExperimentRow]) -> dict:
    return {"experiments": [row.as_dict() for row in rows]}


# ---------------------------------------------------------------------------
# Scan summaries
# ---------------------------------------------------------------------------

def verdict_counts(records: Sequence[Mapping]) -> pd.DataFrame:
    """Per-ecosystem scanned / benign / flagged / errors, plus a total row."""
    df = verdict_frame(records)
    if df.empty:
        return pd.DataFrame(columns=list(COUNT_COLUMNS))

    classified = df["disposition"] == "classified"
    df = df.assign(
        scanned=1,
        benign=(classified & (df["label"] == "benign")).astype(int),
        flagged=(classified & (df["label"] == "malicious")).astype(int),
        errors=(~classified).astype(int),
    )
    counts = df.groupby("ecosystem", sort=True)[["scanned", "benign", "flagged", "errors"]].sum().reset_index()
    total = counts[["scanned", "benign", "flagged", "errors"]].sum().to_dict()
    counts = pd.concat([counts, pd.DataFrame([{"ecosystem": "total", **total}])], ignore_index=True)
    return counts[list(COUNT_COLUMNS)].astype({c: int for c in COUNT_COLUMNS[1:]})


def model_summary(records: Sequence[Mapping]) -> pd.DataFrame:
    """
    Per model and ecosystem: packages classified, packages flagged, packages
    flagged by that model alone and the flag rate.
    """
    results = model_results_frame(records)
    if results.empty:
        return pd.DataFrame(columns=list(MODEL_SUMMARY_COLUMNS))

    results = results.assign(flagged=(results["label"] == "malicious").astype(int))
    flaggers = results[results["flagged"] == 1].groupby(["ecosystem", "name", "version"])["model_id"].nunique()
    solo = set(flaggers[flaggers == 1].index)
    results["flagged_only_by_model"] = [
        int(flag == 1 and (eco, name, version) in solo)
        for flag, eco, name, version in zip(results["flagged"], results["ecosystem"], results["name"], results["version"])
    ]

    summary = (
        results.groupby(["model_id", "ecosystem"], sort=True)
        .agg(classified=("label", "size"), flagged=("flagged", "sum"), flagged_only_by_model=("flagged_only_by_model", "sum"))
        .reset_index()
    )
    summary["flag_rate"] = (summary["flagged"] / summary["classified"]).round(4)
    return summary[list(MODEL_SUMMARY_COLUMNS)]


def daily_rollup(records: Sequence[Mapping]) -> pd.DataFrame:
    df = verdict_frame(records)
    df = df.dropna(subset=["scanned_at"])
    if df.empty:
        return pd.DataFrame(columns=list(DAILY_COLUMNS))

    df = df.assign(
        date=df["scanned_at"].dt.strftime("%Y-%m-%d"),
        scanned=1,
        flagged=(df["label"] == "malicious").astype(int),
        errors=(df["disposition"] != "classified").astype(int),
    )
    rollup = df.groupby(["date", "ecosystem"], sort=True)[["scanned", "flagged", "errors"]].sum().reset_index()
    return rollup[list(DAILY_COLUMNS)]


def flagged_packages(records: Sequence[Mapping]) -> pd.DataFrame:
    df = verdict_frame(records)
    df = df[df["label"] == "malicious"]
    if df.empty:
        return pd.DataFrame(columns=list(FLAGGED_COLUMNS))
    df = df.sort_values(["max_probability", "ecosystem", "name"], ascending=[False, True, True])
    return df[list(FLAGGED_COLUMNS)].reset_index(drop=True)


def build_scan_report(records: Sequence[Mapping]) -> dict:
    """All scan tables for a set of sink records."""
    records = list(records)
    logger.debug("Building scan report over %d verdicts", len(records))
    return {
        "counts": verdict_counts(records),
        "models": model_summary(records),
        "daily": daily_rollup(records),
        "flagged": flagged_packages(records),
    }


def experiment_table_from_document(document: Mapping) -> pd.DataFrame:
    """Rebuild the wide "mean ± std" table from an experiments document."""
    rows = []
    for entry in document.get("experiments") or []:
        summaries = {
            metric: MetricSummary(float(entry[metric]["mean"]), float(entry[metric]["std"]))
            for metric in METRICS
        }
        report = MetricsReport(**summaries, k=entry.get("k", 0), repeats=entry.get("repeats", 0))
        rows.append(ExperimentRow(coerce_kind(entry["learner"]), entry["setting"], report))
    return experiment_table(rows)
