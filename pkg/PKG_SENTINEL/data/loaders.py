"""
Data loading and persistence
============================
Feature tables (CSV or Parquet), corpus trees, campaign maps, benign
manifests, provenance documents, YAML/JSON settings files and scan sinks.
"""

import glob
import json
import logging
import os
from typing import Iterator, NamedTuple, Sequence

import pandas as pd
import yaml

from data.archives import Ecosystem, coerce_ecosystem, is_archive_path
from data.processors import ERROR_COLUMN, META_COLUMNS
from data.validators import validate_feature_header
from utils.file_helpers import ensure_dir, load_from_parquet, read_jsonl, save_to_parquet, write_json

logger = logging.getLogger(__name__)

# Error messages
ERROR_TABLE_READ = "Cannot read feature table {path}: {error}"
ERROR_TABLE_HEADER = "Feature table {path} does not match the schema: {detail}"
ERROR_SETTINGS_READ = "Cannot read {path}: {error}"
ERROR_MAP_LINE = "{path}:{line}: expected two tab-separated fields"

PROVENANCE_SUFFIX = ".provenance.json"
SINK_PATTERN = "scan-*.jsonl"
TEXT_COLUMNS = ("ecosystem", "name", "version", "label", ERROR_COLUMN)


class FeatureTableError(ValueError):
    pass


class SettingsFileError(ValueError):
    pass


class CorpusEntry(NamedTuple):
    ecosystem: Ecosystem
    name: str
    version: str
    archive_path: str


def _is_parquet(path) -> bool:
    return os.fspath(path).lower().endswith((".parquet", ".pq"))


# ---------------------------------------------------------------------------
# Feature tables
# ---------------------------------------------------------------------------

def write_feature_table(df: pd.DataFrame, path) -> None:
    """Write a feature frame as CSV, or Parquet when the suffix asks for it."""
    path = os.fspath(path)
    ensure_dir(os.path.dirname(path))
    if _is_parquet(path):
        if not save_to_parquet(df, path):
            raise OSError(f"Cannot write {path}")
        return
    df.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")


def read_feature_table(path, feature_names: Sequence[str]) -> pd.DataFrame:
    """
    Read a feature table and check its header against the schema names.

    Meta columns stay text; feature cells are converted by the caller.

    Raises:
        FileNotFoundError: the file does not exist.
        FeatureTableError: unreadable content or a header that does not match.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)

    try:
        if _is_parquet(path):
            df = load_from_parquet(path)
            if df is None:
                raise ValueError("unreadable parquet file")
            df = df.astype({c: str for c in TEXT_COLUMNS if c in df.columns})
        else:
            df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (ValueError, UnicodeDecodeError, pd.errors.ParserError) as exc:
        raise FeatureTableError(ERROR_TABLE_READ.format(path=path, error=exc)) from exc

    is_valid, message = validate_feature_header(df.columns, feature_names)
    if not is_valid:
        raise FeatureTableError(ERROR_TABLE_HEADER.format(path=path, detail=message))
    if ERROR_COLUMN not in df.columns:
        df[ERROR_COLUMN] = ""
    return df[list(META_COLUMNS) + list(feature_names) + [ERROR_COLUMN]]


# ---------------------------------------------------------------------------
# Corpus trees and manifests
# ---------------------------------------------------------------------------

def _subdirs(path: str) -> list[str]:
    return sorted(entry.name for entry in os.scandir(path) if entry.is_dir())


def _package_dirs(ecosystem_dir: str) -> Iterator[tuple[str, str]]:
    """(package name, directory); ``@scope`` directories hold scoped npm names."""
    for name in _subdirs(ecosystem_dir):
        path = os.path.join(ecosystem_dir, name)
        if name.startswith("@"):
            for inner in _subdirs(path):
                yield f"{name}/{inner}", os.path.join(path, inner)
        else:
            yield name, path


def iter_corpus(root, ecosystems: Sequence[str] | None = None) -> Iterator[CorpusEntry]:
    """
    Walk ``<root>/<ecosystem>/<name>/<version>/<archive>``.

    Every archive file in a version directory is yielded; the walk is sorted.
    """
    root = os.fspath(root)
    wanted = {coerce_ecosystem(e) for e in ecosystems} if ecosystems else set(Ecosystem)
    for ecosystem in sorted(wanted, key=lambda e: e.value):
        ecosystem_dir = os.path.join(root, ecosystem.value)
        if not os.path.isdir(ecosystem_dir):
            continue
        for name, package_dir in _package_dirs(ecosystem_dir):
            for version in _subdirs(package_dir):
                version_dir = os.path.join(package_dir, version)
                for file_name in sorted(os.listdir(version_dir)):
                    archive_path = os.path.join(version_dir, file_name)
                    if os.path.isfile(archive_path) and is_archive_path(archive_path):
                        yield CorpusEntry(ecosystem, name, version, archive_path)


def _read_pairs(path) -> Iterator[tuple[int, str, str]]:
    with open(path, encoding="utf-8") as handle:
        for line_number, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [part.strip() for part in line.split("\t")]
            if len(parts) != 2 or not all(parts):
                raise SettingsFileError(ERROR_MAP_LINE.format(path=path, line=line_number))
            yield line_number, parts[0], parts[1]


def load_campaign_map(path) -> dict[str, str]:
    """``name<TAB>campaign_id`` lines; later lines win."""
    return {name: campaign for _, name, campaign in _read_pairs(path)}


def load_benign_manifest(path) -> set[tuple[str, str]]:
    """``ecosystem<TAB>name`` lines."""
    manifest = set()
    for line_number, ecosystem, name in _read_pairs(path):
        try:
            manifest.add((coerce_ecosystem(ecosystem).value, name))
        except ValueError as exc:
            raise SettingsFileError(f"{path}:{line_number}: {exc}") from exc
    return manifest


# ---------------------------------------------------------------------------
# Provenance and settings files
# ---------------------------------------------------------------------------

def provenance_path(table_path) -> str:
    return os.fspath(table_path) + PROVENANCE_SUFFIX


def write_provenance(table_path, document: dict) -> str:
    path = provenance_path(table_path)
    write_json(path, document)
    return path


def read_provenance(table_path) -> dict:
    path = provenance_path(table_path)
    if not os.path.exists(path):
        return {}
    with open(path, encoding="utf-8") as handle:
        return json.load(handle)


def load_settings_file(path):
    """Parse a YAML or JSON document (JSON is valid YAML)."""
    try:
        with open(path, encoding="utf-8") as handle:
            return yaml.safe_load(handle)
    except FileNotFoundError:
        raise
    except (OSError, yaml.YAMLError) as exc:
        raise SettingsFileError(ERROR_SETTINGS_READ.format(path=path, error=exc)) from exc


def dump_settings_file(path, document) -> None:
    ensure_dir(os.path.dirname(os.fspath(path)))
    with open(path, "w", encoding="utf-8") as handle:
        yaml.safe_dump(document, handle, sort_keys=True, default_flow_style=False)


# ---------------------------------------------------------------------------
# Scan sinks
# ---------------------------------------------------------------------------

def list_sink_files(directory) -> list[str]:
    return sorted(glob.glob(os.path.join(os.fspath(directory), SINK_PATTERN)))


def read_sink_records(paths: Sequence) -> list[dict]:
    records = []
    for path in paths:
        file_records, _ = read_jsonl(path)
        records.extend(file_records)
    logger.debug("Read %d verdicts from %d sink files", len(records), len(paths))
    return records


def list_experiment_files(directory) -> list[str]:
    """Experiment reports written by ``cli.py evaluate --output <file>.json``."""
    return sorted(glob.glob(os.path.join(os.fspath(directory), "*.json")))


def read_experiment_document(path) -> dict:
    try:
        with open(path, encoding="utf-8") as handle:
            document = json.load(handle)
    except (OSError, ValueError) as exc:
        raise SettingsFileError(ERROR_SETTINGS_READ.format(path=path, error=exc)) from exc
    if not isinstance(document, dict) or not isinstance(document.get("experiments"), list):
        raise SettingsFileError(ERROR_SETTINGS_READ.format(path=path, error="no experiments list"))
    return document
