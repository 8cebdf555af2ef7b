"""
Data validation
===============
Checks for feature tables, hyperparameter files and scan configuration.
Every validator returns ``(is_valid, message)``.
"""

from typing import Mapping, Sequence

from data.archives import Ecosystem
from data.processors import ERROR_COLUMN, META_COLUMNS
from models.params import InvalidHyperparams, params_from_mapping

# ---------------------------------------------------------------------------
# Centralized messages
# ---------------------------------------------------------------------------

MSG_VALIDATION_SUCCESS = "Validation successful"
MSG_MISSING_COLUMNS = "Missing columns: {columns}"
MSG_COLUMN_ORDER = "Feature columns are not in schema order (first difference at '{column}')"
MSG_UNKNOWN_COLUMNS = "Unexpected columns: {columns}"
MSG_NOT_A_MAPPING = "{what} must be a mapping"
MSG_BAD_RATIO = "Ratio must be strictly between 0 and 1 (got {ratio})"
MSG_BAD_SOURCE = "Source #{index}: {detail}"
MSG_BAD_MODEL = "Model #{index}: {detail}"
MSG_BAD_WORKERS = "workers must be a positive integer"
MSG_BAD_CAPS = "caps.{key} must be a positive integer"
MSG_NO_MODELS = "At least one model is required"
MSG_UNKNOWN_KEYS = "Unknown keys: {keys}"


# ---------------------------------------------------------------------------
# Validation requirements
# ---------------------------------------------------------------------------

SOURCE_KINDS = ("local", "pypi", "npm")
SCAN_CONFIG_KEYS = {
    "sources", "models", "schema", "dictionary", "output_dir", "state_dir",
    "download_dir", "workers", "caps",
}
CAP_KEYS = ("download_bytes", "total_bytes", "file_bytes")
ECOSYSTEM_VALUES = tuple(e.value for e in Ecosystem)


# ---------------------------------------------------------------------------
# Internal helpers
# ---------------------------------------------------------------------------

def _is_positive_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and value > 0


def _validate_source(index: int, source) -> tuple[bool, str]:
    if not isinstance(source, Mapping):
        return False, MSG_BAD_SOURCE.format(index=index, detail="not a mapping")
    kind = source.get("kind")
    if kind not in SOURCE_KINDS:
        return False, MSG_BAD_SOURCE.format(index=index, detail=f"kind must be one of {', '.join(SOURCE_KINDS)}")
    if kind == "local":
        if not source.get("path"):
            return False, MSG_BAD_SOURCE.format(index=index, detail="local sources need a path")
    if source.get("ecosystem") is not None and source.get("ecosystem") not in ECOSYSTEM_VALUES:
        return False, MSG_BAD_SOURCE.format(index=index, detail="ecosystem must be npm or pypi")
    interval = source.get("poll_interval")
    if interval is not None and (isinstance(interval, bool) or not isinstance(interval, (int, float)) or interval <= 0):
        return False, MSG_BAD_SOURCE.format(index=index, detail="poll_interval must be a positive number")
    return True, MSG_VALIDATION_SUCCESS


def _validate_model_entry(index: int, entry) -> tuple[bool, str]:
    if not isinstance(entry, Mapping):
        return False, MSG_BAD_MODEL.format(index=index, detail="not a mapping")
    if not entry.get("id") or not entry.get("path"):
        return False, MSG_BAD_MODEL.format(index=index, detail="id and path are required")
    ecosystems = entry.get("ecosystems")
    if ecosystems is not None:
        if not isinstance(ecosystems, list) or any(e not in ECOSYSTEM_VALUES for e in ecosystems):
            return False, MSG_BAD_MODEL.format(index=index, detail="ecosystems must list npm and/or pypi")
    return True, MSG_VALIDATION_SUCCESS


# ---------------------------------------------------------------------------
# Public validators
# ---------------------------------------------------------------------------

def validate_feature_header(columns: Sequence[str], feature_names: Sequence[str]) -> tuple[bool, str]:
    """
    The header must be the meta columns, then the schema names in order, then
    an optional trailing ``error`` column.
    """
    columns = list(columns)
    expected = list(META_COLUMNS) + list(feature_names)
    missing = [c for c in expected if c not in columns]
    if missing:
        shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
        return False, MSG_MISSING_COLUMNS.format(columns=shown)

    extra = [c for c in columns if c not in expected and c != ERROR_COLUMN]
    if extra:
        return False, MSG_UNKNOWN_COLUMNS.format(columns=", ".join(extra[:5]))

    ordered = [c for c in columns if c != ERROR_COLUMN]
    for got, want in zip(ordered, expected):
        if got != want:
            return False, MSG_COLUMN_ORDER.format(column=got)
    return True, MSG_VALIDATION_SUCCESS


def validate_hyperparams(kind, mapping) -> tuple[bool, str]:
    if mapping is None:
        return True, MSG_VALIDATION_SUCCESS
    if not isinstance(mapping, Mapping):
        return False, MSG_NOT_A_MAPPING.format(what="Hyperparameters")
    try:
        params_from_mapping(kind, mapping)
    except (InvalidHyperparams, TypeError) as exc:
        return False, str(exc)
    return True, MSG_VALIDATION_SUCCESS


def validate_ratio(ratio) -> tuple[bool, str]:
    if isinstance(ratio, bool) or not isinstance(ratio, (int, float)) or not 0 < ratio < 1:
        return False, MSG_BAD_RATIO.format(ratio=ratio)
    return True, MSG_VALIDATION_SUCCESS


def validate_scan_config(document) -> tuple[bool, str]:
    if not isinstance(document, Mapping):
        return False, MSG_NOT_A_MAPPING.format(what="Scan configuration")

    unknown = sorted(set(document) - SCAN_CONFIG_KEYS)
    if unknown:
        return False, MSG_UNKNOWN_KEYS.format(keys=", ".join(unknown))

    for index, source in enumerate(document.get("sources") or []):
        is_valid, message = _validate_source(index, source)
        if not is_valid:
            return is_valid, message

    models = document.get("models") or []
    if not models:
        return False, MSG_NO_MODELS
    for index, entry in enumerate(models):
        is_valid, message = _validate_model_entry(index, entry)
        if not is_valid:
            return is_valid, message

    if "workers" in document and not _is_positive_int(document["workers"]):
        return False, MSG_BAD_WORKERS

    caps = document.get("caps") or {}
    if not isinstance(caps, Mapping):
        return False, MSG_NOT_A_MAPPING.format(what="caps")
    for key in CAP_KEYS:
        if key in caps and not _is_positive_int(caps[key]):
            return False, MSG_BAD_CAPS.format(key=key)

    return True, MSG_VALIDATION_SUCCESS
