"""
Registry feeds and downloads
============================
Sources of newly published packages (PyPI updates RSS, npm follow-changes,
local drop directory), the shared HTTP session and archive fetching with a
size cap.
"""

import hashlib
import logging
import os
import shutil
import xml.etree.ElementTree as ET
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from datetime import datetime
from email.utils import parsedate_to_datetime
from pathlib import Path
from urllib.parse import quote, unquote, urlparse
from urllib.request import url2pathname

import requests
from requests.adapters import HTTPAdapter
from urllib3.util.retry import Retry

from config.settings import (
    DEFAULT_POLL_INTERVAL,
    FEED_URLS,
    HTTP_BACKOFF_BASE,
    HTTP_RETRIES,
    HTTP_RETRY_STATUSES,
    HTTP_TIMEOUT,
    MAX_DOWNLOAD_BYTES,
    NPM_CHANGES_LIMIT,
    READ_CHUNK_BYTES,
    USER_AGENT,
)
from data.archives import Ecosystem, coerce_ecosystem, is_archive_path, name_version_from_filename
from utils.date_helpers import from_timestamp_ns, utc_now
from utils.file_helpers import ensure_dir

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Centralized messages
# ---------------------------------------------------------------------------

ERROR_FEED_UNAVAILABLE = "Feed {source} unavailable: {error}"
ERROR_FEED_PAYLOAD = "Malformed payload from {source}: {detail}"
ERROR_DOWNLOAD = "Download of {url} failed: {error}"
ERROR_OVERSIZE = "Archive {url} is {size} bytes, over the cap of {cap}"
ERROR_OVERSIZE_STREAM = "Archive {url} exceeded the cap of {cap} bytes while downloading"
ERROR_NO_RELEASE = "No downloadable release for {ecosystem}/{name}"


class FeedError(Exception):
    pass


class FeedUnavailable(FeedError):
    """Network or server failure; try again after ``retry_after`` seconds."""

    def __init__(self, message: str, retry_after: float = HTTP_BACKOFF_BASE):
        super().__init__(message)
        self.retry_after = retry_after


class MalformedFeedPayload(FeedError):
    pass


class FetchError(Exception):
    pass


class DownloadFailed(FetchError):
    def __init__(self, message: str, retryable: bool = True):
        super().__init__(message)
        self.retryable = retryable


class OversizeDownload(FetchError):
    pass


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeedEvent:
    ecosystem: Ecosystem
    name: str
    version: str
    archive_url: str
    observed_at: datetime
    cursor: str = ""

    @property
    def triple(self) -> tuple[str, str, str]:
        return (self.ecosystem.value, self.name, self.version)


@dataclass(frozen=True)
class FeedPoll:
    events: tuple[FeedEvent, ...]
    next_cursor: str | None
    malformed: tuple[str, ...] = field(default_factory=tuple)


@dataclass(frozen=True)
class FetchedArchive:
    path: str
    sha256: str
    size: int


# ---------------------------------------------------------------------------
# HTTP session
# ---------------------------------------------------------------------------

def build_session(retries: int = HTTP_RETRIES, backoff: float = HTTP_BACKOFF_BASE) -> requests.Session:
    """Session with the scanner user agent and exponential-backoff retries."""
    session = requests.Session()
    session.headers.update({"User-Agent": USER_AGENT})
    retry = Retry(
        total=retries,
        backoff_factor=backoff,
        status_forcelist=HTTP_RETRY_STATUSES,
        allowed_methods=frozenset({"GET", "HEAD"}),
        respect_retry_after_header=True,
        raise_on_status=False,
    )
    adapter = HTTPAdapter(max_retries=retry)
    session.mount("https://", adapter)
    session.mount("http://", adapter)
    return session


def retry_after_seconds(attempt: int, base: float = HTTP_BACKOFF_BASE) -> float:
    """Backoff for the given consecutive failure (1-based): base, 2*base, 4*base..."""
    return base * (2 ** max(0, attempt - 1))


def _get_json(session: requests.Session, url: str, source: str, params=None):
    try:
        response = session.get(url, params=params, timeout=HTTP_TIMEOUT)
    except requests.RequestException as exc:
        raise FeedUnavailable(ERROR_FEED_UNAVAILABLE.format(source=source, error=exc)) from exc
    if response.status_code >= 500 or response.status_code == 429:
        raise FeedUnavailable(ERROR_FEED_UNAVAILABLE.format(source=source, error=f"HTTP {response.status_code}"))
    if response.status_code >= 400:
        return None
    try:
        return response.json()
    except ValueError as exc:
        raise MalformedFeedPayload(ERROR_FEED_PAYLOAD.format(source=source, detail=exc)) from exc


# ---------------------------------------------------------------------------
# Feed sources
# ---------------------------------------------------------------------------

class FeedSource(ABC):
    kind = ""

    def __init__(self, ecosystem=None, poll_interval: float = DEFAULT_POLL_INTERVAL):
        self.ecosystem = coerce_ecosystem(ecosystem) if ecosystem else None
        self.poll_interval = float(poll_interval)

    @property
    @abstractmethod
    def source_id(self) -> str:
        """Stable key for the persisted cursor."""

    @abstractmethod
    def poll(self, since: str | None) -> FeedPoll:
        """Events strictly newer than ``since``, oldest first."""


class LocalDirectoryFeed(FeedSource):
    """
    Every archive file under ``path`` is one event.

    The cursor is ``<mtime_ns>|<relative path>``, so files dropped later (or
    with a later name at the same mtime) are newer. The ecosystem comes from
    the source, else from a leading ``npm/`` or ``pypi/`` directory.
    """

    kind = "local"

    def __init__(self, path, ecosystem=None, poll_interval: float = DEFAULT_POLL_INTERVAL):
        super().__init__(ecosystem, poll_interval)
        self.path = os.fspath(path)

    @property
    def source_id(self) -> str:
        return f"local:{os.path.abspath(self.path)}"

    def _ecosystem_for(self, rel_path: str) -> Ecosystem | None:
        if self.ecosystem is not None:
            return self.ecosystem
        head = rel_path.split("/", 1)[0].lower()
        try:
            return Ecosystem(head)
        except ValueError:
            return None

    def poll(self, since: str | None) -> FeedPoll:
        if not os.path.isdir(self.path):
            raise FeedUnavailable(ERROR_FEED_UNAVAILABLE.format(source=self.source_id, error="directory missing"))

        candidates = []
        for root, _dirs, files in os.walk(self.path):
            for file_name in files:
                full_path = os.path.join(root, file_name)
                if not is_archive_path(full_path):
                    continue
                rel_path = os.path.relpath(full_path, self.path).replace(os.sep, "/")
                mtime_ns = os.stat(full_path).st_mtime_ns
                candidates.append((f"{mtime_ns:020d}|{rel_path}", mtime_ns, rel_path, full_path))

        events = []
        malformed = []
        for cursor, mtime_ns, rel_path, full_path in sorted(candidates):
            if since is not None and cursor <= since:
                continue
            ecosystem = self._ecosystem_for(rel_path)
            name, version = name_version_from_filename(full_path)
            if ecosystem is None:
                malformed.append(f"{rel_path}: unknown ecosystem")
                continue
            events.append(FeedEvent(
                ecosystem=ecosystem,
                name=name,
                version=version,
                archive_url=Path(full_path).resolve().as_uri(),
                observed_at=from_timestamp_ns(mtime_ns),
                cursor=cursor,
            ))

        next_cursor = max([since or ""] + [c[0] for c in candidates]) or since
        for detail in malformed:
            logger.warning(ERROR_FEED_PAYLOAD.format(source=self.source_id, detail=detail))
        return FeedPoll(tuple(events), next_cursor, tuple(malformed))


class PyPIUpdatesFeed(FeedSource):
    """
    PyPI's recent-updates RSS feed; each release is resolved to its archive
    through the JSON API, preferring the sdist.
    """

    kind = "pypi"

    def __init__(self, session: requests.Session, url: str = FEED_URLS["pypi"],
                 json_url: str = FEED_URLS["pypi_json"], poll_interval: float = DEFAULT_POLL_INTERVAL):
        super().__init__(Ecosystem.PYPI, poll_interval)
        self.session = session
        self.url = url
        self.json_url = json_url

    @property
    def source_id(self) -> str:
        return f"pypi:{self.url}"

    def _fetch_items(self) -> list[ET.Element]:
        try:
            response = self.session.get(self.url, timeout=HTTP_TIMEOUT)
            response.raise_for_status()
        except requests.RequestException as exc:
            raise FeedUnavailable(ERROR_FEED_UNAVAILABLE.format(source=self.source_id, error=exc)) from exc
        try:
            root = ET.fromstring(response.content)
        except ET.ParseError as exc:
            raise MalformedFeedPayload(ERROR_FEED_PAYLOAD.format(source=self.source_id, detail=exc)) from exc
        return root.findall("./channel/item")

    def archive_url(self, name: str, version: str) -> str | None:
        document = _get_json(self.session, self.json_url.format(name=quote(name), version=quote(version)),
                             self.source_id)
        return pypi_archive_from_release(document)

    def poll(self, since: str | None) -> FeedPoll:
        parsed = []
        malformed = []
        for item in self._fetch_items():
            title = (item.findtext("title") or "").strip()
            published = item.findtext("pubDate")
            parts = title.rsplit(" ", 1)
            if len(parts) != 2 or not parts[1] or not published:
                malformed.append(f"item {title!r}: missing name, version or date")
                continue
            try:
                observed_at = parsedate_to_datetime(published)
            except (TypeError, ValueError):
                malformed.append(f"item {title!r}: bad date {published!r}")
                continue
            name, version = parts
            cursor = f"{int(observed_at.timestamp() * 1e9):020d}|{name}|{version}"
            parsed.append((cursor, name, version, observed_at))

        events = []
        for cursor, name, version, observed_at in sorted(parsed):
            if since is not None and cursor <= since:
                continue
            url = self.archive_url(name, version)
            if url is None:
                malformed.append(f"{name} {version}: no archive")
                continue
            events.append(FeedEvent(Ecosystem.PYPI, name, version, url, observed_at, cursor))

        next_cursor = max([since or ""] + [p[0] for p in parsed]) or since
        for detail in malformed:
            logger.warning(ERROR_FEED_PAYLOAD.format(source=self.source_id, detail=detail))
        return FeedPoll(tuple(events), next_cursor, tuple(malformed))


class NpmChangesFeed(FeedSource):
    """
    npm registry follow-changes feed with a sequence cursor. A fresh cursor
    starts at ``now`` instead of replaying the whole registry.
    """

    kind = "npm"

    def __init__(self, session: requests.Session, url: str = FEED_URLS["npm"],
                 registry: str = FEED_URLS["npm_registry"], limit: int = NPM_CHANGES_LIMIT,
                 poll_interval: float = DEFAULT_POLL_INTERVAL):
        super().__init__(Ecosystem.NPM, poll_interval)
        self.session = session
        self.url = url
        self.registry = registry.rstrip("/")
        self.limit = limit

    @property
    def source_id(self) -> str:
        return f"npm:{self.url}"

    def latest_manifest(self, name: str):
        return _get_json(self.session, f"{self.registry}/{quote(name, safe='@')}/latest", self.source_id)

    def parse_change(self, change) -> FeedEvent:
        """One changes-feed row to an event; raises MalformedFeedPayload."""
        if not isinstance(change, dict) or not change.get("id") or "seq" not in change:
            raise MalformedFeedPayload(ERROR_FEED_PAYLOAD.format(source=self.source_id, detail="change without id/seq"))
        name = str(change["id"])
        doc = change.get("doc") if isinstance(change.get("doc"), dict) else None
        if doc is not None:
            version = (doc.get("dist-tags") or {}).get("latest")
            manifest = (doc.get("versions") or {}).get(version) if version else None
        else:
            manifest = self.latest_manifest(name)
            version = manifest.get("version") if isinstance(manifest, dict) else None
        if not version:
            raise MalformedFeedPayload(ERROR_FEED_PAYLOAD.format(source=self.source_id, detail=f"{name}: no version"))

        tarball = ((manifest or {}).get("dist") or {}).get("tarball") if isinstance(manifest, dict) else None
        return FeedEvent(
            ecosystem=Ecosystem.NPM,
            name=name,
            version=str(version),
            archive_url=tarball or npm_tarball_url(self.registry, name, str(version)),
            observed_at=utc_now(),
            cursor=str(change["seq"]),
        )

    def poll(self, since: str | None) -> FeedPoll:
        params = {"since": since if since is not None else "now", "limit": self.limit}
        payload = _get_json(self.session, self.url, self.source_id, params=params)
        if not isinstance(payload, dict) or not isinstance(payload.get("results"), list):
            raise MalformedFeedPayload(ERROR_FEED_PAYLOAD.format(source=self.source_id, detail="no results list"))

        events = []
        malformed = []
        for change in payload["results"]:
            if isinstance(change, dict) and change.get("deleted"):
                continue
            try:
                events.append(self.parse_change(change))
            except MalformedFeedPayload as exc:
                malformed.append(str(exc))
                logger.warning(str(exc))

        last_seq = payload.get("last_seq")
        next_cursor = str(last_seq) if last_seq is not None else (events[-1].cursor if events else since)
        return FeedPoll(tuple(events), next_cursor, tuple(malformed))


# ---------------------------------------------------------------------------
# Release resolution
# ---------------------------------------------------------------------------

def npm_tarball_url(registry: str, name: str, version: str) -> str:
    basename = name.rsplit("/", 1)[-1]
    return f"{registry.rstrip('/')}/{name}/-/{basename}-{version}.tgz"


def pypi_archive_from_release(document) -> str | None:
    """sdist URL of a JSON API release document, else the first wheel."""
    if not isinstance(document, dict):
        return None
    urls = [u for u in document.get("urls") or [] if isinstance(u, dict) and u.get("url")]
    for package_type in ("sdist", "bdist_wheel"):
        for entry in urls:
            if entry.get("packagetype") == package_type:
                return entry["url"]
    return urls[0]["url"] if urls else None


def latest_release_event(ecosystem, name: str, session: requests.Session | None = None) -> FeedEvent:
    """Resolve the newest release of a package (used to download benign corpora)."""
    ecosystem = coerce_ecosystem(ecosystem)
    source = f"{ecosystem.value}:{name}"
    session = session or build_session()
    if ecosystem is Ecosystem.NPM:
        registry = FEED_URLS["npm_registry"]
        manifest = _get_json(session, f"{registry}/{quote(name, safe='@')}/latest", source)
        version = manifest.get("version") if isinstance(manifest, dict) else None
        url = ((manifest or {}).get("dist") or {}).get("tarball") if version else None
        url = url or (npm_tarball_url(registry, name, version) if version else None)
    else:
        document = _get_json(session, FEED_URLS["pypi_project"].format(name=quote(name)), source)
        version = ((document or {}).get("info") or {}).get("version") if isinstance(document, dict) else None
        url = pypi_archive_from_release(document)
    if not version or not url:
        raise MalformedFeedPayload(ERROR_NO_RELEASE.format(ecosystem=ecosystem.value, name=name))
    return FeedEvent(ecosystem, name, str(version), url, utc_now(), "")


# ---------------------------------------------------------------------------
# Fetching
# ---------------------------------------------------------------------------

def _destination(event: FeedEvent, dest_dir: str) -> str:
    basename = unquote(os.path.basename(urlparse(event.archive_url).path)) or f"{event.name}-{event.version}"
    basename = basename.replace(os.sep, "_")
    prefix = hashlib.sha1(event.archive_url.encode("utf-8")).hexdigest()[:10]
    directory = ensure_dir(os.path.join(dest_dir, event.ecosystem.value))
    return os.path.join(directory, f"{prefix}-{basename}")


def _copy_capped(source, target_path: str, url: str, max_bytes: int) -> FetchedArchive:
    digest = hashlib.sha256()
    size = 0
    try:
        with open(target_path, "wb") as target:
            for chunk in source:
                if not chunk:
                    continue
                size += len(chunk)
                if size > max_bytes:
                    raise OversizeDownload(ERROR_OVERSIZE_STREAM.format(url=url, cap=max_bytes))
                digest.update(chunk)
                target.write(chunk)
    except BaseException:
        if os.path.exists(target_path):
            os.unlink(target_path)
        raise
    return FetchedArchive(target_path, digest.hexdigest(), size)


def _file_chunks(handle):
    return iter(lambda: handle.read(READ_CHUNK_BYTES), b"")


def fetch_archive(event: FeedEvent, dest, max_bytes: int = MAX_DOWNLOAD_BYTES,
                  session: requests.Session | None = None) -> FetchedArchive:
    """
    Persist the event's archive under ``dest`` and record its SHA-256.

    ``file://`` URLs are copied locally. The size cap is checked against the
    declared size before reading and enforced again while streaming.
    """
    url = event.archive_url
    target_path = _destination(event, os.fspath(dest))
    parsed = urlparse(url)

    if parsed.scheme == "file":
        source_path = url2pathname(unquote(parsed.path))
        try:
            size = os.stat(source_path).st_size
        except OSError as exc:
            raise DownloadFailed(ERROR_DOWNLOAD.format(url=url, error=exc), retryable=False) from exc
        if size > max_bytes:
            raise OversizeDownload(ERROR_OVERSIZE.format(url=url, size=size, cap=max_bytes))
        try:
            with open(source_path, "rb") as handle:
                return _copy_capped(_file_chunks(handle), target_path, url, max_bytes)
        except OSError as exc:
            raise DownloadFailed(ERROR_DOWNLOAD.format(url=url, error=exc), retryable=False) from exc

    if parsed.scheme not in ("http", "https"):
        raise DownloadFailed(ERROR_DOWNLOAD.format(url=url, error="unsupported URL scheme"), retryable=False)

    session = session or build_session()
    try:
        with session.get(url, stream=True, timeout=HTTP_TIMEOUT) as response:
            if response.status_code >= 400:
                retryable = response.status_code in HTTP_RETRY_STATUSES
                raise DownloadFailed(ERROR_DOWNLOAD.format(url=url, error=f"HTTP {response.status_code}"),
                                     retryable=retryable)
            declared = response.headers.get("Content-Length")
            if declared and declared.isdigit() and int(declared) > max_bytes:
                raise OversizeDownload(ERROR_OVERSIZE.format(url=url, size=int(declared), cap=max_bytes))
            return _copy_capped(response.iter_content(READ_CHUNK_BYTES), target_path, url, max_bytes)
    except requests.RequestException as exc:
        raise DownloadFailed(ERROR_DOWNLOAD.format(url=url, error=exc), retryable=True) from exc


def remove_download(fetched: FetchedArchive) -> None:
    try:
        os.unlink(fetched.path)
    except OSError:
        logger.debug("Could not remove %s", fetched.path)


def store_archive(fetched: FetchedArchive, event: FeedEvent, corpus_root) -> str:
    """Move a download into ``<root>/<ecosystem>/<name>/<version>/``."""
    directory = ensure_dir(os.path.join(os.fspath(corpus_root), event.ecosystem.value, event.name, event.version))
    target = os.path.join(directory, os.path.basename(fetched.path).split("-", 1)[1])
    shutil.move(fetched.path, target)
    return target
