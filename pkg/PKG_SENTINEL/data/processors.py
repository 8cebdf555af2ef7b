"""
Data processing
===============
Functions to build and clean the feature tables and to flatten scan verdicts
into frames for reports and the dashboard.
"""

import logging
from typing import Iterable, Mapping, Sequence

import pandas as pd

from utils.date_helpers import parse_date_column

logger = logging.getLogger(__name__)

META_COLUMNS = ("ecosystem", "name", "version", "label")
ERROR_COLUMN = "error"
UNLABELED = "-"
LABEL_VALUES = ("0", "1", UNLABELED)

VERDICT_COLUMNS = (
    "ecosystem", "name", "version", "disposition", "label", "max_probability",
    "flagged_by", "top_features", "distribution", "truncated", "lex_error",
    "error", "scanned_at", "schema_hash", "sha256",
)
MODEL_RESULT_COLUMNS = ("ecosystem", "name", "version", "model_id", "probability", "label", "scanned_at")

MSG_DROPPED_ERROR_ROWS = "Dropped %d rows with extraction errors"
MSG_DROPPED_INCOMPLETE_ROWS = "Dropped %d rows with missing or non-numeric feature cells"


def _normalize_label(value) -> str:
    text = "" if value is None else str(value).strip().lower()
    if text in ("1", "1.0", "malicious"):
        return "1"
    if text in ("0", "0.0", "benign"):
        return "0"
    return UNLABELED


def build_feature_frame(records: Iterable[Mapping], feature_names: Sequence[str]) -> pd.DataFrame:
    """
    One row per package: meta columns, one column per feature, then ``error``.

    Each record has ecosystem/name/version/label, ``values`` (a sequence in
    schema order, or None) and ``error`` (empty on success). Rows with an
    error keep their feature cells empty.
    """
    columns = list(META_COLUMNS) + list(feature_names) + [ERROR_COLUMN]
    rows = []
    for record in records:
        error = record.get("error") or ""
        values = record.get("values")
        row = {
            "ecosystem": record["ecosystem"],
            "name": record["name"],
            "version": record["version"],
            "label": _normalize_label(record.get("label")),
            ERROR_COLUMN: error,
        }
        if values is not None and not error:
            row.update(zip(feature_names, values))
        rows.append(row)
    return pd.DataFrame(rows, columns=columns)


def clean_feature_frame(df: pd.DataFrame, feature_names: Sequence[str]) -> pd.DataFrame:
    """Keep successfully extracted rows with numeric feature cells."""
    result_df = df.copy()
    if ERROR_COLUMN in result_df.columns:
        errors = result_df[ERROR_COLUMN].fillna("").astype(str).str.strip()
        failed = errors != ""
        if failed.any():
            logger.warning(MSG_DROPPED_ERROR_ROWS, int(failed.sum()))
        result_df = result_df[~failed]

    for column in ("ecosystem", "name", "version"):
        result_df[column] = result_df[column].astype(str).str.strip()
    result_df["ecosystem"] = result_df["ecosystem"].str.lower()
    result_df["label"] = result_df["label"].map(_normalize_label)

    features = result_df[list(feature_names)].apply(pd.to_numeric, errors="coerce")
    incomplete = features.isna().any(axis=1)
    if incomplete.any():
        logger.warning(MSG_DROPPED_INCOMPLETE_ROWS, int(incomplete.sum()))
    result_df[list(feature_names)] = features
    return result_df[~incomplete].reset_index(drop=True)


# ---------------------------------------------------------------------------
# Scan verdict frames
# ---------------------------------------------------------------------------

def _top_features_text(top_features) -> str:
    return ", ".join(f"{name} ({value:.3f})" for name, value in (top_features or []))


def verdict_frame(records: Iterable[Mapping]) -> pd.DataFrame:
    """One row per verdict record read from sink files."""
    rows = []
    for record in records:
        results = record.get("models") or []
        probabilities = [r.get("probability") for r in results if r.get("probability") is not None]
        rows.append({
            "ecosystem": record.get("ecosystem"),
            "name": record.get("name"),
            "version": record.get("version"),
            "disposition": record.get("disposition"),
            "label": record.get("label"),
            "max_probability": max(probabilities) if probabilities else None,
            "flagged_by": ", ".join(r["model_id"] for r in results if r.get("label") == "malicious"),
            "top_features": _top_features_text(record.get("top_features")),
            "distribution": record.get("distribution"),
            "truncated": bool(record.get("truncated")),
            "lex_error": bool(record.get("lex_error")),
            "error": record.get("error") or "",
            "scanned_at": record.get("scanned_at"),
            "schema_hash": record.get("schema_hash"),
            "sha256": record.get("sha256"),
        })
    df = pd.DataFrame(rows, columns=list(VERDICT_COLUMNS))
    return parse_date_column(df, "scanned_at")


def model_results_frame(records: Iterable[Mapping]) -> pd.DataFrame:
    """One row per (verdict, model) pair for classified verdicts."""
    rows = []
    for record in records:
        for result in record.get("models") or []:
            rows.append({
                "ecosystem": record.get("ecosystem"),
                "name": record.get("name"),
                "version": record.get("version"),
                "model_id": result.get("model_id"),
                "probability": result.get("probability"),
                "label": result.get("label"),
                "scanned_at": record.get("scanned_at"),
            })
    df = pd.DataFrame(rows, columns=list(MODEL_RESULT_COLUMNS))
    return parse_date_column(df, "scanned_at")
