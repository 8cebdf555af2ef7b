"""
Business logic - Labeled Datasets
=================================
Labeled samples, malicious-corpus deduplication, benign/malicious assembly at
a fixed ratio, cross-ecosystem merging and per-feature distribution reports.
"""

import logging
import os
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from data.archives import ArchiveError, Ecosystem, coerce_ecosystem, name_version_from_filename
from data.feeds import FeedError, FetchError, fetch_archive, latest_release_event, store_archive
from data.loaders import iter_corpus
from data.processors import UNLABELED, build_feature_frame, clean_feature_frame
from models.ensemble import Label
from service.features_service import (
    FeatureSchema,
    FeatureVector,
    SchemaMismatch,
    SensitiveDictionary,
    check_schema,
    extract_archive,
)

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Centralized messages
# ---------------------------------------------------------------------------

ERROR_INSUFFICIENT_BENIGN = "Need {needed} benign samples for {malicious} malicious at ratio {ratio}, have {available}"
ERROR_DUPLICATE_SAMPLE = "Duplicate sample {ecosystem}/{name}@{version}"
ERROR_MIXED_SCHEMAS = "Samples come from more than one feature schema"
ERROR_BAD_RATIO = "Ratio must be strictly between 0 and 1 (got {ratio})"
ERROR_WRONG_LABEL = "Expected only {label} samples in the {role} list"
MSG_DEDUP_FUNNEL = "Malicious dedup: %d -> %d (latest version) -> %d (campaigns) -> %d (identical vectors)"
MSG_UNLABELED_ROWS = "Skipped %d unlabeled rows"

REPORT_COLUMNS = ["feature", "label", "min", "mean", "median", "q3", "max", "std"]


class DatasetError(Exception):
    pass


class InsufficientBenign(DatasetError):
    pass


class DuplicateSample(DatasetError):
    pass


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabeledSample:
    feature_vector: FeatureVector
    label: Label
    ecosystem: Ecosystem
    name: str
    version: str
    campaign_id: str | None = None

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.ecosystem.value, self.name, self.version)


@dataclass(frozen=True)
class Dataset:
    samples: tuple[LabeledSample, ...]
    schema_version: str
    schema_hash: str
    feature_names: tuple[str, ...]
    provenance: dict = field(default_factory=dict, compare=False)
    ratio: float | None = None

    def __post_init__(self):
        seen = set()
        for sample in self.samples:
            if sample.key in seen:
                raise DuplicateSample(ERROR_DUPLICATE_SAMPLE.format(
                    ecosystem=sample.ecosystem.value, name=sample.name, version=sample.version))
            seen.add(sample.key)
            check_schema(self.schema_hash, sample.feature_vector.schema_hash)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_malicious(self) -> int:
        return sum(1 for s in self.samples if s.label is Label.MALICIOUS)

    @property
    def n_benign(self) -> int:
        return len(self.samples) - self.n_malicious

    def matrix(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, len(self.feature_names)))
        return np.asarray([s.feature_vector.values for s in self.samples], dtype=float)

    def labels(self) -> np.ndarray:
        return np.asarray([s.label.as_int for s in self.samples], dtype=int)

    def ecosystems(self) -> np.ndarray:
        return np.asarray([s.ecosystem.value for s in self.samples])

    def vectors(self) -> list[FeatureVector]:
        return [s.feature_vector for s in self.samples]

    def filter(self, ecosystem) -> "Dataset":
        ecosystem = coerce_ecosystem(ecosystem)
        return self._with_samples(tuple(s for s in self.samples if s.ecosystem is ecosystem))

    def _with_samples(self, samples: tuple[LabeledSample, ...]) -> "Dataset":
        return Dataset(samples, self.schema_version, self.schema_hash, self.feature_names,
                       dict(self.provenance), self.ratio)


def empty_dataset(schema: FeatureSchema) -> Dataset:
    return Dataset((), schema.version, schema.hash, tuple(schema.names))


def dataset_from_samples(samples: Iterable[LabeledSample], schema: FeatureSchema,
                         provenance: dict | None = None, ratio: float | None = None) -> Dataset:
    return Dataset(tuple(samples), schema.version, schema.hash, tuple(schema.names), provenance or {}, ratio)


# ---------------------------------------------------------------------------
# Version ordering
# ---------------------------------------------------------------------------

_VERSION_PART = re.compile(r"\d+|[A-Za-z]+")


def version_key(version: str) -> tuple:
    """Numeric-aware key; identical part sequences fall back to the raw string."""
    parts = tuple(
        (0, int(part), "") if part.isdigit() else (1, 0, part.lower())
        for part in _VERSION_PART.findall(version)
    )
    return parts, version


def compare_versions(a: str, b: str) -> int:
    key_a, key_b = version_key(a), version_key(b)
    return (key_a > key_b) - (key_a < key_b)


# ---------------------------------------------------------------------------
# Malicious deduplication
# ---------------------------------------------------------------------------

def _latest_versions(samples: list[LabeledSample]) -> list[LabeledSample]:
    best: dict[tuple[str, str], LabeledSample] = {}
    for sample in samples:
        package = (sample.ecosystem.value, sample.name)
        current = best.get(package)
        if current is None or version_key(sample.version) > version_key(current.version):
            best[package] = sample
    keep = {id(s) for s in best.values()}
    return [s for s in samples if id(s) in keep]


def _campaign_representatives(samples: list[LabeledSample]) -> list[LabeledSample]:
    chosen: dict[str, LabeledSample] = {}
    for sample in samples:
        if sample.campaign_id is None:
            continue
        current = chosen.get(sample.campaign_id)
        if current is None or (sample.name, sample.key) < (current.name, current.key):
            chosen[sample.campaign_id] = sample
    keep = {id(s) for s in chosen.values()}
    return [s for s in samples if s.campaign_id is None or id(s) in keep]


def _unique_vectors(samples: list[LabeledSample]) -> list[LabeledSample]:
    chosen: dict[tuple[float, ...], LabeledSample] = {}
    for sample in samples:
        values = sample.feature_vector.values
        current = chosen.get(values)
        if current is None or sample.key < current.key:
            chosen[values] = sample
    keep = {id(s) for s in chosen.values()}
    return [s for s in samples if id(s) in keep]


def dedup_malicious_trace(samples: Sequence[LabeledSample]) -> tuple[list[LabeledSample], list[int]]:
    """
    Apply the three filters in order and report the count after each.

    Returns (survivors in input order, [input, after versions, after campaigns, after vectors]).
    """
    current = list(samples)
    counts = [len(current)]
    for step in (_latest_versions, _campaign_representatives, _unique_vectors):
        current = step(current)
        counts.append(len(current))
    logger.info(MSG_DEDUP_FUNNEL, *counts)
    return current, counts


def dedup_malicious(samples: Sequence[LabeledSample]) -> list[LabeledSample]:
    return dedup_malicious_trace(samples)[0]


# ---------------------------------------------------------------------------
# Assembly and merging
# ---------------------------------------------------------------------------

def benign_needed(n_malicious: int, ratio: float) -> int:
    return int(round(n_malicious * ratio / (1.0 - ratio)))


def _common_schema(samples: Sequence[LabeledSample]) -> str | None:
    hashes = {s.feature_vector.schema_hash for s in samples}
    if len(hashes) > 1:
        raise SchemaMismatch(ERROR_MIXED_SCHEMAS)
    return hashes.pop() if hashes else None


def assemble(
        benign: Sequence[LabeledSample],
        malicious: Sequence[LabeledSample],
        schema: FeatureSchema,
        ratio: float = 0.9,
        provenance: dict | None = None,
) -> Dataset:
    """
    Keep every malicious sample and the first benign samples by name so that
    benign / total equals ``ratio`` (to the nearest sample).
    """
    if not 0 < ratio < 1:
        raise DatasetError(ERROR_BAD_RATIO.format(ratio=ratio))
    if any(s.label is not Label.BENIGN for s in benign):
        raise DatasetError(ERROR_WRONG_LABEL.format(label="benign", role="benign"))
    if any(s.label is not Label.MALICIOUS for s in malicious):
        raise DatasetError(ERROR_WRONG_LABEL.format(label="malicious", role="malicious"))

    needed = benign_needed(len(malicious), ratio)
    if len(benign) < needed:
        raise InsufficientBenign(ERROR_INSUFFICIENT_BENIGN.format(
            needed=needed, malicious=len(malicious), ratio=ratio, available=len(benign)))

    kept_benign = sorted(benign, key=lambda s: (s.name, s.ecosystem.value, version_key(s.version)))[:needed]
    samples = list(malicious) + kept_benign
    _common_schema(samples)

    document = dict(provenance or {})
    document.update({
        "ratio": ratio,
        "malicious": len(malicious),
        "benign": len(kept_benign),
        "benign_available": len(benign),
        "schema_hash": schema.hash,
    })
    logger.info("Assembled %d malicious + %d benign samples", len(malicious), len(kept_benign))
    return dataset_from_samples(samples, schema, document, ratio)


def merge_cross(ds_a: Dataset, ds_b: Dataset) -> Dataset:
    """Union of two datasets built on the same schema."""
    if not ds_b.samples:
        return ds_a
    if not ds_a.samples:
        return ds_b
    if ds_a.schema_version != ds_b.schema_version:
        raise SchemaMismatch(f"Schema versions differ: {ds_a.schema_version} vs {ds_b.schema_version}")
    check_schema(ds_a.schema_hash, ds_b.schema_hash)

    ratio = ds_a.ratio if ds_a.ratio == ds_b.ratio else None
    provenance = {
        "merged": [ds_a.provenance, ds_b.provenance],
        "malicious": ds_a.n_malicious + ds_b.n_malicious,
        "benign": ds_a.n_benign + ds_b.n_benign,
        "schema_hash": ds_a.schema_hash,
    }
    return Dataset(ds_a.samples + ds_b.samples, ds_a.schema_version, ds_a.schema_hash,
                   ds_a.feature_names, provenance, ratio)


# ---------------------------------------------------------------------------
# Feature tables
# ---------------------------------------------------------------------------

def dataset_to_frame(ds: Dataset) -> pd.DataFrame:
    records = (
        {
            "ecosystem": s.ecosystem.value,
            "name": s.name,
            "version": s.version,
            "label": str(s.label.as_int),
            "values": s.feature_vector.values,
            "error": "",
        }
        for s in ds.samples
    )
    return build_feature_frame(records, ds.feature_names)


def samples_from_frame(df: pd.DataFrame, schema: FeatureSchema,
                       campaigns: dict[str, str] | None = None) -> list[LabeledSample]:
    """Labeled rows of a feature table; error and unlabeled rows are skipped."""
    clean = clean_feature_frame(df, schema.names)
    unlabeled = clean["label"] == UNLABELED
    if unlabeled.any():
        logger.warning(MSG_UNLABELED_ROWS, int(unlabeled.sum()))
    clean = clean[~unlabeled]

    campaigns = campaigns or {}
    values = clean[list(schema.names)].to_numpy(dtype=float)
    samples = []
    for row, vector in zip(clean.itertuples(index=False), values):
        samples.append(LabeledSample(
            feature_vector=FeatureVector(schema.version, schema.hash, tuple(float(v) for v in vector)),
            label=Label.from_value(row.label),
            ecosystem=coerce_ecosystem(row.ecosystem),
            name=row.name,
            version=row.version,
            campaign_id=campaigns.get(row.name),
        ))
    return samples


def dataset_from_frame(df: pd.DataFrame, schema: FeatureSchema, provenance: dict | None = None) -> Dataset:
    ratio = (provenance or {}).get("ratio")
    return dataset_from_samples(samples_from_frame(df, schema), schema, provenance, ratio)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def feature_distribution_report(ds: Dataset) -> pd.DataFrame:
    """min / mean / median / q3 / max / std (population) per feature and label."""
    if not ds.samples:
        return pd.DataFrame(columns=REPORT_COLUMNS)

    df = pd.DataFrame(ds.matrix(), columns=list(ds.feature_names))
    df["label"] = [s.label.value for s in ds.samples]

    rows = []
    for feature in ds.feature_names:
        for label in (Label.BENIGN.value, Label.MALICIOUS.value):
            values = df.loc[df["label"] == label, feature].to_numpy(dtype=float)
            if values.size == 0:
                continue
            rows.append({
                "feature": feature,
                "label": label,
                "min": float(values.min()),
                "mean": float(values.mean()),
                "median": float(np.median(values)),
                "q3": float(np.percentile(values, 75)),
                "max": float(values.max()),
                "std": float(values.std()),
            })
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


# ---------------------------------------------------------------------------
# Corpus extraction
# ---------------------------------------------------------------------------

def featurize_entries(
        entries: Iterable,
        schema: FeatureSchema,
        dictionary: SensitiveDictionary,
        label: str = UNLABELED,
        progress=None,
) -> list[dict]:
    """
    Extract one feature record per archive.

    ``entries`` yields (ecosystem, name, version, archive_path); name and
    version may be None to take them from the archive. Failures become
    records with an ``error`` message and no values.
    """
    records = []
    for ecosystem, name, version, archive_path in entries:
        record = {"ecosystem": coerce_ecosystem(ecosystem).value, "label": label, "archive_path": archive_path}
        try:
            result = extract_archive(archive_path, ecosystem, schema, dictionary, name=name, version=version)
        except (ArchiveError, OSError) as exc:
            fallback_name, fallback_version = name_version_from_filename(archive_path)
            logger.warning("Cannot extract %s: %s", archive_path, exc)
            record.update(name=name or fallback_name, version=version or fallback_version,
                          values=None, error=f"{type(exc).__name__}: {exc}")
        else:
            record.update(name=result.artifact.name, version=result.artifact.version,
                          values=result.vector.values, error="")
        records.append(record)
        if progress is not None:
            progress.update(1)
    return records


def build_corpus_samples(
        root,
        schema: FeatureSchema,
        dictionary: SensitiveDictionary,
        label: Label,
        ecosystems: Sequence[str] | None = None,
        manifest: set[tuple[str, str]] | None = None,
        campaigns: dict[str, str] | None = None,
        progress=None,
) -> tuple[list[LabeledSample], list[dict]]:
    """Featurize a ``<ecosystem>/<name>/<version>/<archive>`` tree."""
    entries = [
        entry for entry in iter_corpus(root, ecosystems)
        if manifest is None or (entry.ecosystem.value, entry.name) in manifest
    ]
    records = featurize_entries(entries, schema, dictionary, str(label.as_int), progress)
    frame = build_feature_frame(records, schema.names)
    return samples_from_frame(frame, schema, campaigns), records


def fetch_benign_corpus(manifest: set[tuple[str, str]], root, session=None, max_bytes: int | None = None,
                        progress=None) -> tuple[int, list[str]]:
    """
    Download the latest release of every manifest entry missing from ``root``.

    Returns (downloaded count, failure messages); failures do not stop the loop.
    """
    root = os.fspath(root)
    present = {(entry.ecosystem.value, entry.name) for entry in iter_corpus(root)}
    downloaded = 0
    failures = []
    for ecosystem, name in sorted(manifest):
        if (ecosystem, name) in present:
            continue
        try:
            event = latest_release_event(ecosystem, name, session)
            kwargs = {"max_bytes": max_bytes} if max_bytes else {}
            fetched = fetch_archive(event, os.path.join(root, ".downloads"), session=session, **kwargs)
            store_archive(fetched, event, root)
            downloaded += 1
        except (FeedError, FetchError, OSError) as exc:
            failures.append(f"{ecosystem}/{name}: {exc}")
            logger.warning("Cannot fetch %s/%s: %s", ecosystem, name, exc)
        if progress is not None:
            progress.update(1)
    return downloaded, failures
