"""
Business logic - Scanner
========================
Classifies packages pulled from registry feeds: download, ingest, lex,
featurize, predict with every attached model, and append one verdict per
package to the run's sink file.

A package is flagged when at least one attached model labels it malicious.
"""

import json
import logging
import os
import re
import threading
import time
import uuid
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Iterable, Mapping, Sequence

from config.settings import (
    CURSOR_FILE_NAME,
    DEDUP_FILE_NAME,
    DEFAULT_DICTIONARY_FILE,
    DEFAULT_POLL_INTERVAL,
    DEFAULT_SCAN_CONFIG_FILE,
    DEFAULT_SCHEMA_FILE,
    DEFAULT_WORKERS,
    FEED_URLS,
    FILES,
    MAX_DOWNLOAD_BYTES,
    MAX_FILE_BYTES,
    MAX_TOTAL_BYTES,
    TOP_FEATURES,
    get_env_var,
)
from data.archives import ArchiveError, Ecosystem, coerce_ecosystem, name_version_from_filename
from data.feeds import (
    FeedEvent,
    FeedPoll,
    FeedSource,
    FeedUnavailable,
    FetchError,
    LocalDirectoryFeed,
    MalformedFeedPayload,
    NpmChangesFeed,
    PyPIUpdatesFeed,
    build_session,
    fetch_archive,
    remove_download,
    retry_after_seconds,
)
from data.loaders import load_settings_file
from data.validators import validate_scan_config
from models.ensemble import Label, top_features
from models.serialization import load_model
from service.features_service import (
    FeatureSchema,
    SchemaMismatch,
    SensitiveDictionary,
    extract_archive,
    load_dictionary,
    load_schema,
)
from service.training_service import predict
from utils.date_helpers import isoformat_utc, utc_date_stamp, utc_now
from utils.file_helpers import append_jsonl, ensure_dir, sha256_file, write_json

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Centralized messages
# ---------------------------------------------------------------------------

ERROR_CONFIG = "Invalid scan configuration {path}: {detail}"
ERROR_MODEL_MISSING = "Model file not found: {path}"
ERROR_MODEL_SCHEMAS = "Attached models use different feature schemas ({first} vs {other})"
ERROR_DUPLICATE_MODEL = "Model id {model_id!r} is attached twice"
ERROR_NO_APPLICABLE_MODEL = "No attached model applies to {ecosystem}"
MSG_FEED_RETRY = "Feed %s unavailable (%s); retrying in %.0fs"
MSG_RUN_DONE = "Run %s finished: %d scanned, %d flagged, %d errors"
MSG_STOPPING = "Stop requested; cancelled %d queued packages"


class ScanConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

class Disposition(str, Enum):
    CLASSIFIED = "classified"
    INGEST_ERROR = "ingest_error"
    DOWNLOAD_ERROR = "download_error"
    NO_MODEL = "no_model"


@dataclass(frozen=True)
class ModelResult:
    model_id: str
    probability: float
    label: Label

    def as_record(self) -> dict:
        return {"model_id": self.model_id, "probability": self.probability, "label": self.label.value}


@dataclass(frozen=True)
class ScanVerdict:
    ecosystem: Ecosystem
    name: str
    version: str
    disposition: Disposition
    scanned_at: datetime
    schema_hash: str
    label: Label | None = None
    models: tuple[ModelResult, ...] = ()
    top_features: tuple[tuple[str, float], ...] = ()
    distribution: str = ""
    truncated: bool = False
    lex_error: bool = False
    error: str = ""
    sha256: str = ""

    @property
    def triple(self) -> tuple[str, str, str]:
        return (self.ecosystem.value, self.name, self.version)

    @property
    def flagged(self) -> bool:
        return self.label is Label.MALICIOUS

    def as_record(self) -> dict:
        return {
            "ecosystem": self.ecosystem.value,
            "name": self.name,
            "version": self.version,
            "disposition": self.disposition.value,
            "label": self.label.value if self.label else None,
            "models": [result.as_record() for result in self.models],
            "top_features": [[name, value] for name, value in self.top_features],
            "distribution": self.distribution,
            "truncated": self.truncated,
            "lex_error": self.lex_error,
            "error": self.error,
            "scanned_at": isoformat_utc(self.scanned_at),
            "schema_hash": self.schema_hash,
            "sha256": self.sha256,
        }


@dataclass(frozen=True)
class AttachedModel:
    """A loaded model and the ecosystems it classifies (empty = all)."""

    model_id: str
    model: object
    ecosystems: frozenset = frozenset()

    def applies_to(self, ecosystem) -> bool:
        return not self.ecosystems or coerce_ecosystem(ecosystem) in self.ecosystems


@dataclass(frozen=True)
class ScanCaps:
    download_bytes: int = MAX_DOWNLOAD_BYTES
    total_bytes: int = MAX_TOTAL_BYTES
    file_bytes: int = MAX_FILE_BYTES

    @classmethod
    def from_mapping(cls, caps: Mapping | None) -> "ScanCaps":
        caps = caps or {}
        return cls(
            download_bytes=caps.get("download_bytes", MAX_DOWNLOAD_BYTES),
            total_bytes=caps.get("total_bytes", MAX_TOTAL_BYTES),
            file_bytes=caps.get("file_bytes", MAX_FILE_BYTES),
        )


@dataclass
class ScanConfig:
    sources: list
    models: list
    schema: str = DEFAULT_SCHEMA_FILE
    dictionary: str = DEFAULT_DICTIONARY_FILE
    output_dir: str = FILES["scans"]
    state_dir: str = FILES["state"]
    download_dir: str = FILES["downloads"]
    workers: int = DEFAULT_WORKERS
    caps: ScanCaps = field(default_factory=ScanCaps)


EMPTY_COUNTS = {"scanned": 0, "benign": 0, "flagged": 0, "errors": 0}


@dataclass
class RunSummary:
    """Per-ecosystem counts for one run; benign + flagged + errors = scanned."""

    run_id: str
    sink_path: str
    counts: dict = field(default_factory=dict)
    malformed: int = 0
    cancelled: int = 0
    skipped: int = 0

    def record(self, verdict: ScanVerdict) -> None:
        counts = self.counts.setdefault(verdict.ecosystem.value, dict(EMPTY_COUNTS))
        counts["scanned"] += 1
        if verdict.disposition is not Disposition.CLASSIFIED:
            counts["errors"] += 1
        elif verdict.flagged:
            counts["flagged"] += 1
        else:
            counts["benign"] += 1

    def total(self, key: str) -> int:
        return sum(c[key] for c in self.counts.values())

    def as_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "sink": self.sink_path,
            "ecosystems": {eco: dict(c) for eco, c in sorted(self.counts.items())},
            "scanned": self.total("scanned"),
            "flagged": self.total("flagged"),
            "errors": self.total("errors"),
            "malformed_feed_entries": self.malformed,
            "skipped_duplicates": self.skipped,
            "cancelled": self.cancelled,
        }


# ---------------------------------------------------------------------------
# Configuration and model attachment
# ---------------------------------------------------------------------------

def load_scan_config(path=None) -> ScanConfig:
    """
    Read the scan/watch configuration.

    The path defaults to ``PKG_SENTINEL_CONFIG`` and then to the bundled file.
    Raises FileNotFoundError for a missing file and ScanConfigError otherwise.
    """
    path = path or get_env_var("CONFIG", "") or DEFAULT_SCAN_CONFIG_FILE
    try:
        document = load_settings_file(path)
    except ValueError as exc:
        raise ScanConfigError(str(exc)) from exc

    is_valid, message = validate_scan_config(document)
    if not is_valid:
        raise ScanConfigError(ERROR_CONFIG.format(path=path, detail=message))

    return ScanConfig(
        sources=list(document.get("sources") or []),
        models=list(document["models"]),
        schema=document.get("schema") or DEFAULT_SCHEMA_FILE,
        dictionary=document.get("dictionary") or DEFAULT_DICTIONARY_FILE,
        output_dir=document.get("output_dir") or FILES["scans"],
        state_dir=document.get("state_dir") or FILES["state"],
        download_dir=document.get("download_dir") or FILES["downloads"],
        workers=document.get("workers", DEFAULT_WORKERS),
        caps=ScanCaps.from_mapping(document.get("caps")),
    )


def check_model_schemas(models: Sequence[AttachedModel], schema: FeatureSchema | None = None) -> None:
    """All attached models (and the extraction schema) must share one hash."""
    expected = schema.hash if schema is not None else (models[0].model.schema_hash if models else None)
    for attached in models:
        if attached.model.schema_hash != expected:
            raise SchemaMismatch(ERROR_MODEL_SCHEMAS.format(
                first=str(expected)[:12], other=attached.model.schema_hash[:12]))


def load_models(entries: Iterable[Mapping], schema: FeatureSchema) -> list[AttachedModel]:
    """
    Load the configured models.

    Raises:
        FileNotFoundError: a model path does not exist.
        ModelFileError / SchemaMismatch: unreadable model or a different schema.
    """
    attached = []
    seen_ids = set()
    for entry in entries:
        model_id = str(entry["id"])
        if model_id in seen_ids:
            raise ScanConfigError(ERROR_DUPLICATE_MODEL.format(model_id=model_id))
        seen_ids.add(model_id)
        path = entry["path"]
        if not os.path.isfile(path):
            raise FileNotFoundError(ERROR_MODEL_MISSING.format(path=path))
        model = load_model(path, expected_schema=schema)
        ecosystems = frozenset(coerce_ecosystem(e) for e in entry.get("ecosystems") or ())
        attached.append(AttachedModel(model_id, model, ecosystems))
        logger.info("Attached model %s (%s, %d trees)", model_id, model.kind.value, len(model.trees))
    check_model_schemas(attached, schema)
    return attached


def build_sources(entries: Iterable[Mapping], session=None) -> list[FeedSource]:
    sources = []
    for entry in entries:
        kind = entry["kind"]
        interval = entry.get("poll_interval", DEFAULT_POLL_INTERVAL)
        if kind == "local":
            sources.append(LocalDirectoryFeed(entry["path"], entry.get("ecosystem"), interval))
            continue
        session = session or build_session()
        if kind == "pypi":
            sources.append(PyPIUpdatesFeed(session, url=entry.get("url", FEED_URLS["pypi"]), poll_interval=interval))
        else:
            sources.append(NpmChangesFeed(session, url=entry.get("url", FEED_URLS["npm"]),
                                          registry=entry.get("registry", FEED_URLS["npm_registry"]),
                                          poll_interval=interval))
    return sources


# ---------------------------------------------------------------------------
# Single package
# ---------------------------------------------------------------------------

def _error_verdict(ecosystem, name, version, disposition, error, schema_hash, sha256="") -> ScanVerdict:
    return ScanVerdict(
        ecosystem=ecosystem,
        name=name,
        version=version,
        disposition=disposition,
        scanned_at=utc_now(),
        schema_hash=schema_hash,
        error=error,
        sha256=sha256,
    )


def scan_package(
        archive_path,
        ecosystem,
        models: Sequence[AttachedModel],
        schema: FeatureSchema,
        dictionary: SensitiveDictionary,
        name: str | None = None,
        version: str | None = None,
        caps: ScanCaps | None = None,
        sha256: str | None = None,
) -> ScanVerdict:
    """
    Classify one archive with every applicable model.

    Archive problems give an ``ingest_error`` verdict instead of an exception.
    The top features come from the most confident flagging model, or from the
    most confident model when nothing flags.
    """
    ecosystem = coerce_ecosystem(ecosystem)
    caps = caps or ScanCaps()
    check_model_schemas(models, schema)
    archive_path = os.fspath(archive_path)

    file_name, file_version = name_version_from_filename(archive_path)
    name = name or file_name
    version = version or file_version
    if sha256 is None:
        sha256 = sha256_file(archive_path) if os.path.isfile(archive_path) else ""

    try:
        features = extract_archive(
            archive_path, ecosystem, schema, dictionary, name=name, version=version,
            max_total_bytes=caps.total_bytes, max_file_bytes=caps.file_bytes,
        )
    except (ArchiveError, OSError) as exc:
        logger.warning("Ingest failed for %s/%s %s: %s", ecosystem.value, name, version, exc)
        return _error_verdict(ecosystem, name, version, Disposition.INGEST_ERROR, str(exc), schema.hash, sha256)

    artifact = features.artifact
    applicable = [m for m in models if m.applies_to(ecosystem)]
    if not applicable:
        return _error_verdict(ecosystem, artifact.name, artifact.version, Disposition.NO_MODEL,
                              ERROR_NO_APPLICABLE_MODEL.format(ecosystem=ecosystem.value), schema.hash, sha256)

    results = []
    for attached in applicable:
        probability, label = predict(attached.model, features.vector)
        results.append((attached, ModelResult(attached.model_id, probability, label)))

    flagging = [pair for pair in results if pair[1].label is Label.MALICIOUS]
    explaining, _ = max(flagging or results, key=lambda pair: pair[1].probability)

    return ScanVerdict(
        ecosystem=ecosystem,
        name=artifact.name,
        version=artifact.version,
        disposition=Disposition.CLASSIFIED,
        scanned_at=utc_now(),
        schema_hash=schema.hash,
        label=Label.MALICIOUS if flagging else Label.BENIGN,
        models=tuple(result for _, result in results),
        top_features=tuple(top_features(explaining.model, TOP_FEATURES)),
        distribution=artifact.distribution,
        truncated=artifact.truncated,
        lex_error=features.lex_error,
        sha256=sha256,
    )


def scan_event(event: FeedEvent, models, schema, dictionary, download_dir, caps: ScanCaps, session=None) -> ScanVerdict:
    """Download, scan and delete one feed event's archive."""
    try:
        fetched = fetch_archive(event, download_dir, caps.download_bytes, session=session)
    except FetchError as exc:
        logger.warning("Download failed for %s/%s %s: %s", event.ecosystem.value, event.name, event.version, exc)
        return _error_verdict(event.ecosystem, event.name, event.version, Disposition.DOWNLOAD_ERROR,
                              str(exc), schema.hash)
    try:
        return scan_package(fetched.path, event.ecosystem, models, schema, dictionary,
                            name=event.name, version=event.version, caps=caps, sha256=fetched.sha256)
    finally:
        remove_download(fetched)


# ---------------------------------------------------------------------------
# Run state
# ---------------------------------------------------------------------------

class CursorStore:
    """Per-source cursors, saved atomically after each batch."""

    def __init__(self, path):
        self.path = os.fspath(path)
        self._cursors = {}
        if os.path.exists(self.path):
            with open(self.path, encoding="utf-8") as handle:
                self._cursors = json.load(handle)

    def get(self, source_id: str) -> str | None:
        return self._cursors.get(source_id)

    def set(self, source_id: str, cursor: str | None) -> None:
        if cursor is None or cursor == self._cursors.get(source_id):
            return
        self._cursors[source_id] = cursor
        write_json(self.path, self._cursors)


_SEEN_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}
_SEEN_UNESCAPES = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}
_SEEN_ESCAPED = re.compile(r"\\(.)")


def _escape_field(value: str) -> str:
    return "".join(_SEEN_ESCAPES.get(ch, ch) for ch in value)


def _unescape_field(value: str) -> str:
    return _SEEN_ESCAPED.sub(lambda m: _SEEN_UNESCAPES.get(m.group(1), m.group(1)), value)


class SeenCache:
    """
    Append-only ``ecosystem<TAB>name<TAB>version`` file of scanned triples.

    Backslash, tab and line breaks inside a field are written as ``\\\\``,
    ``\\t``, ``\\n`` and ``\\r`` so every triple stays on one line.
    """

    def __init__(self, path):
        self.path = os.fspath(path)
        self._seen = set()
        if os.path.exists(self.path):
            with open(self.path, encoding="utf-8", newline="\n") as handle:
                for line in handle:
                    parts = line.rstrip("\n").split("\t")
                    if len(parts) == 3:
                        self._seen.add(tuple(_unescape_field(part) for part in parts))
        ensure_dir(os.path.dirname(os.path.abspath(self.path)))
        self._handle = open(self.path, "a", encoding="utf-8", newline="\n")
        self._lock = threading.Lock()

    def __contains__(self, triple) -> bool:
        return tuple(triple) in self._seen

    def add(self, triple) -> None:
        with self._lock:
            triple = tuple(triple)
            if triple in self._seen:
                return
            self._seen.add(triple)
            self._handle.write("\t".join(_escape_field(part) for part in triple) + "\n")
            self._handle.flush()

    def close(self) -> None:
        self._handle.close()


def sink_path_for(output_dir, run_id: str, moment=None) -> str:
    return os.path.join(os.fspath(output_dir), f"scan-{utc_date_stamp(moment)}-{run_id}.jsonl")


def new_run_id() -> str:
    return uuid.uuid4().hex[:8]


# ---------------------------------------------------------------------------
# Watch loop
# ---------------------------------------------------------------------------

class _Run:
    """State shared by the batches of one run_watch call."""

    def __init__(self, pool, sink, seen, cursors, summary, stop_event, scan):
        self.pool = pool
        self.sink = sink
        self.seen = seen
        self.cursors = cursors
        self.summary = summary
        self.stop_event = stop_event
        self.scan = scan

    def process(self, source: FeedSource, poll: FeedPoll) -> None:
        """
        Scan one poll's events and advance the cursor.

        Verdicts are written in event order by this thread only. The cursor
        moves past an event once its verdict is sunk; a cancelled event pins
        it so the next run polls that event again.
        """
        queued = []
        batch_triples = set()
        for event in poll.events:
            if event.triple in self.seen or event.triple in batch_triples:
                queued.append((event, None))
                continue
            batch_triples.add(event.triple)
            queued.append((event, self.pool.submit(self.scan, event)))

        cursor = self.cursors.get(source.source_id)
        contiguous = True
        cancelled = 0
        for event, future in queued:
            if future is None:
                self.summary.skipped += 1
                if contiguous:
                    cursor = event.cursor or cursor
                continue
            if self.stop_event.is_set() and future.cancel():
                cancelled += 1
                contiguous = False
                continue
            verdict = future.result()
            append_verdict(self.sink, verdict)
            self.seen.add(event.triple)
            self.summary.record(verdict)
            if contiguous:
                cursor = event.cursor or cursor

        if cancelled:
            self.summary.cancelled += cancelled
            logger.info(MSG_STOPPING, cancelled)
        elif poll.next_cursor is not None:
            cursor = poll.next_cursor
        self.cursors.set(source.source_id, cursor)


def append_verdict(sink, verdict: ScanVerdict) -> None:
    append_jsonl(sink, verdict.as_record())


def run_watch(
        sources: Sequence[FeedSource],
        models: Sequence[AttachedModel],
        output_dir,
        state_dir,
        download_dir,
        schema: FeatureSchema,
        dictionary: SensitiveDictionary,
        workers: int = DEFAULT_WORKERS,
        stop_event: threading.Event | None = None,
        once: bool = False,
        run_id: str | None = None,
        caps: ScanCaps | None = None,
        session=None,
) -> RunSummary:
    """
    Poll every source, scan new packages on a bounded pool, sink the verdicts.

    With ``once`` each source is polled a single time (the ``scan`` command);
    otherwise the loop runs until ``stop_event`` is set. Packages already
    being scanned when the stop arrives are finished and sunk; queued ones
    are cancelled and stay behind the persisted cursor.
    """
    check_model_schemas(models, schema)
    stop_event = stop_event or threading.Event()
    run_id = run_id or new_run_id()
    caps = caps or ScanCaps()
    ensure_dir(output_dir)
    ensure_dir(state_dir)
    ensure_dir(download_dir)

    summary = RunSummary(run_id, sink_path_for(output_dir, run_id))
    cursors = CursorStore(os.path.join(os.fspath(state_dir), CURSOR_FILE_NAME))
    seen = SeenCache(os.path.join(os.fspath(state_dir), DEDUP_FILE_NAME))
    next_poll = {source.source_id: 0.0 for source in sources}
    failures = defaultdict(int)

    def scan(event: FeedEvent) -> ScanVerdict:
        try:
            return scan_event(event, models, schema, dictionary, download_dir, caps, session)
        except Exception as exc:
            logger.exception("Unexpected failure scanning %s/%s %s", event.ecosystem.value, event.name, event.version)
            return _error_verdict(event.ecosystem, event.name, event.version, Disposition.INGEST_ERROR,
                                  f"{type(exc).__name__}: {exc}", schema.hash)

    logger.info("Run %s: %d sources, %d models, %d workers", run_id, len(sources), len(models), workers)
    try:
        with ThreadPoolExecutor(max_workers=workers) as pool, \
                open(summary.sink_path, "a", encoding="utf-8") as sink:
            run = _Run(pool, sink, seen, cursors, summary, stop_event, scan)
            while not stop_event.is_set():
                for source in sources:
                    if stop_event.is_set():
                        break
                    source_id = source.source_id
                    if next_poll[source_id] > time.monotonic():
                        continue
                    try:
                        poll = source.poll(cursors.get(source_id))
                    except FeedUnavailable as exc:
                        failures[source_id] += 1
                        delay = max(exc.retry_after, retry_after_seconds(failures[source_id]))
                        logger.warning(MSG_FEED_RETRY, source_id, exc, delay)
                        next_poll[source_id] = time.monotonic() + delay
                        continue
                    except MalformedFeedPayload as exc:
                        logger.error("Feed %s: %s", source_id, exc)
                        summary.malformed += 1
                        next_poll[source_id] = time.monotonic() + source.poll_interval
                        continue

                    failures[source_id] = 0
                    summary.malformed += len(poll.malformed)
                    run.process(source, poll)
                    next_poll[source_id] = time.monotonic() + source.poll_interval

                if once:
                    break
                wait = min(next_poll.values(), default=time.monotonic() + DEFAULT_POLL_INTERVAL) - time.monotonic()
                stop_event.wait(max(0.0, wait))
    finally:
        seen.close()

    logger.info(MSG_RUN_DONE, run_id, summary.total("scanned"), summary.total("flagged"), summary.total("errors"))
    return summary


def run_from_config(config: ScanConfig, stop_event=None, once: bool = False, run_id: str | None = None,
                    session=None) -> RunSummary:
    """Load schema, dictionary, models and sources named by ``config`` and run."""
    schema = load_schema(config.schema)
    dictionary = load_dictionary(config.dictionary)
    models = load_models(config.models, schema)
    sources = build_sources(config.sources, session=session)
    return run_watch(
        sources, models, config.output_dir, config.state_dir, config.download_dir,
        schema, dictionary, workers=config.workers, stop_event=stop_event, once=once,
        run_id=run_id, caps=config.caps, session=session,
    )
