"""
Package archive ingestion
=========================
Opens npm tarballs, PyPI sdists and wheels entirely in memory and turns them
into an immutable PackageArtifact with a classified file inventory.
"""

import json
import logging
import os
import re
import stat
import tarfile
import zipfile
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping

from config.settings import MAX_FILE_BYTES, MAX_TOTAL_BYTES, READ_CHUNK_BYTES

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Centralized messages
# ---------------------------------------------------------------------------

ERROR_UNSUPPORTED_FORMAT = "Unsupported archive format: {path}"
ERROR_PATH_TRAVERSAL = "Archive entry escapes the package root: {entry!r}"
ERROR_SIZE_BOMB = "Decompressed size exceeds cap of {cap} bytes in {path}"
ERROR_CORRUPT_ARCHIVE = "Corrupt archive {path}: {error}"
ERROR_MISSING_ARCHIVE = "Archive not found: {path}"


class ArchiveError(Exception):
    """Base class for archive ingestion failures."""


class UnsupportedFormat(ArchiveError):
    pass


class PathTraversal(ArchiveError):
    pass


class SizeBombExceeded(ArchiveError):
    pass


class CorruptArchive(ArchiveError):
    pass


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

class Ecosystem(str, Enum):
    NPM = "npm"
    PYPI = "pypi"


class FileRole(str, Enum):
    SOURCE_JS = "source_js"
    SOURCE_PY = "source_py"
    INSTALL_SCRIPT = "install_script"
    SHELL_SCRIPT = "shell_script"
    OTHER = "other"


SOURCE_ROLES = (FileRole.SOURCE_JS, FileRole.SOURCE_PY)

INSTALL_SCRIPT_NAMES = {
    Ecosystem.NPM: "package.json",
    Ecosystem.PYPI: "setup.py",
}

ROLE_BY_EXTENSION = {
    "js": FileRole.SOURCE_JS,
    "py": FileRole.SOURCE_PY,
    "sh": FileRole.SHELL_SCRIPT,
}


@dataclass(frozen=True)
class PackageFile:
    rel_path: str
    extension: str
    byte_size: int
    content: bytes = b""
    role: FileRole = FileRole.OTHER
    truncated: bool = False

    @property
    def basename(self) -> str:
        return self.rel_path.rsplit("/", 1)[-1]


@dataclass(frozen=True)
class PackageArtifact:
    ecosystem: Ecosystem
    name: str
    version: str
    files: tuple[PackageFile, ...] = field(default_factory=tuple)
    source_path: str = ""
    distribution: str = ""

    @property
    def truncated(self) -> bool:
        return any(f.truncated for f in self.files)

    @property
    def triple(self) -> tuple[str, str, str]:
        return (self.ecosystem.value, self.name, self.version)

    def files_with_role(self, *roles: FileRole) -> list[PackageFile]:
        return [f for f in self.files if f.role in roles]


# ---------------------------------------------------------------------------
# Internal helpers
# ---------------------------------------------------------------------------

_DRIVE_PREFIX = re.compile(r"^[A-Za-z]:")
_FILENAME_VERSION = re.compile(r"^(?P<name>.+?)-(?P<version>\d[\w.!+]*)(?:-.*)?$")
_METADATA_FIELD = r"^{field}:\s*(.+?)\s*$"

_TAR_SUFFIXES = (".tgz", ".tar.gz", ".tar")
_ZIP_SUFFIXES = (".whl", ".zip")
_ARCHIVE_SUFFIXES = _TAR_SUFFIXES + _ZIP_SUFFIXES


class _SizeBudget:
    """Tracks decompressed bytes across one archive."""

    def __init__(self, cap: int, path: str):
        self.cap = cap
        self.path = path
        self.used = 0

    def consume(self, n: int) -> None:
        self.used += n
        if self.used > self.cap:
            raise SizeBombExceeded(ERROR_SIZE_BOMB.format(cap=self.cap, path=self.path))


def coerce_ecosystem(value) -> Ecosystem:
    """Accept an Ecosystem or its string value."""
    if isinstance(value, Ecosystem):
        return value
    return Ecosystem(str(value).strip().lower())


def file_extension(basename: str) -> str:
    """Lowercased substring after the final dot of a basename, or empty."""
    if "." not in basename:
        return ""
    return basename.rsplit(".", 1)[1].lower()


def is_archive_path(path: str) -> bool:
    return str(path).lower().endswith(_ARCHIVE_SUFFIXES)


def safe_relative_path(entry_name: str) -> str:
    """
    Normalize an archive entry name to a relative posix path.

    Raises PathTraversal for absolute names, drive letters and any `..` segment.
    Returns an empty string for entries that name the archive root itself.
    """
    normalized = entry_name.replace("\\", "/")
    if normalized.startswith("/") or _DRIVE_PREFIX.match(normalized):
        raise PathTraversal(ERROR_PATH_TRAVERSAL.format(entry=entry_name))

    segments = normalized.split("/")
    if ".." in segments:
        raise PathTraversal(ERROR_PATH_TRAVERSAL.format(entry=entry_name))

    return "/".join(s for s in segments if s not in ("", "."))


def _read_capped(stream, rel_path: str, budget: _SizeBudget, max_file_bytes: int) -> tuple[bytes, int, bool]:
    """Read a member stream; returns (content, byte_size, truncated)."""
    chunks = []
    size = 0
    truncated = False
    while True:
        chunk = stream.read(READ_CHUNK_BYTES)
        if not chunk:
            break
        size += len(chunk)
        budget.consume(len(chunk))
        if truncated:
            continue
        if size > max_file_bytes:
            truncated = True
            chunks = []
            logger.debug("Content of %s dropped past %d bytes", rel_path, max_file_bytes)
            continue
        chunks.append(chunk)
    return b"".join(chunks), size, truncated


def _detect_format(path: str) -> str:
    lower = path.lower()
    if lower.endswith(_TAR_SUFFIXES):
        return "tar"
    if lower.endswith(_ZIP_SUFFIXES):
        return "zip"

    with open(path, "rb") as handle:
        magic = handle.read(4)
    if magic[:2] == b"\x1f\x8b":
        return "tar"
    if magic[:4] in (b"PK\x03\x04", b"PK\x05\x06"):
        return "zip"
    raise UnsupportedFormat(ERROR_UNSUPPORTED_FORMAT.format(path=path))


def _distribution_name(path: str, archive_format: str, ecosystem: Ecosystem) -> str:
    lower = path.lower()
    if lower.endswith(".whl"):
        return "wheel"
    if archive_format == "zip":
        return "zip"
    if ecosystem is Ecosystem.NPM:
        return "tgz"
    return "sdist"


def _iter_tar_entries(path: str, budget: _SizeBudget, max_file_bytes: int):
    with tarfile.open(path, "r:*") as tar:
        for member in tar:
            rel_path = safe_relative_path(member.name)
            if not rel_path or member.isdir():
                continue
            if member.issym() or member.islnk():
                logger.debug("Ignoring link entry %s in %s", rel_path, path)
                continue
            if not member.isfile():
                continue
            stream = tar.extractfile(member)
            if stream is None:
                continue
            content, size, truncated = _read_capped(stream, rel_path, budget, max_file_bytes)
            yield rel_path, content, size, truncated


def _iter_zip_entries(path: str, budget: _SizeBudget, max_file_bytes: int):
    with zipfile.ZipFile(path) as archive:
        for info in archive.infolist():
            rel_path = safe_relative_path(info.filename)
            if not rel_path or info.is_dir():
                continue
            if stat.S_ISLNK(info.external_attr >> 16):
                logger.debug("Ignoring link entry %s in %s", rel_path, path)
                continue
            with archive.open(info) as stream:
                content, size, truncated = _read_capped(stream, rel_path, budget, max_file_bytes)
            yield rel_path, content, size, truncated


def _shallowest(files: Iterable[PackageFile], predicate) -> PackageFile | None:
    matches = [f for f in files if predicate(f)]
    if not matches:
        return None
    return min(matches, key=lambda f: (f.rel_path.count("/"), f.rel_path))


def _metadata_field(text: str, field_name: str) -> str | None:
    match = re.search(_METADATA_FIELD.format(field=field_name), text, flags=re.MULTILINE)
    return match.group(1) if match else None


def _name_version_from_metadata(files: tuple[PackageFile, ...], ecosystem: Ecosystem) -> tuple[str | None, str | None]:
    """Read name/version from package.json, PKG-INFO or wheel METADATA."""
    if ecosystem is Ecosystem.NPM:
        manifest = _shallowest(files, lambda f: f.basename == "package.json" and f.content)
        if manifest is None:
            return None, None
        try:
            document = json.loads(manifest.content.decode("utf-8", errors="replace"))
        except ValueError:
            return None, None
        if not isinstance(document, dict):
            return None, None
        name = document.get("name")
        version = document.get("version")
        return (name if isinstance(name, str) else None), (version if isinstance(version, str) else None)

    metadata = _shallowest(
        files,
        lambda f: f.content and (f.basename == "PKG-INFO" or f.rel_path.endswith(".dist-info/METADATA")),
    )
    if metadata is None:
        return None, None
    text = metadata.content.decode("utf-8", errors="replace")
    return _metadata_field(text, "Name"), _metadata_field(text, "Version")


def name_version_from_filename(path: str) -> tuple[str, str]:
    """Best-effort `<name>-<version>.<ext>` split of an archive file name."""
    base = os.path.basename(path)
    lower = base.lower()
    for suffix in _ARCHIVE_SUFFIXES:
        if lower.endswith(suffix):
            base = base[: -len(suffix)]
            break
    match = _FILENAME_VERSION.match(base)
    if match:
        return match.group("name"), match.group("version")
    return base, "0"


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------

def classify_files(artifact: PackageArtifact) -> PackageArtifact:
    """Assign lowercase extensions and roles to every file of the artifact."""
    install_name = INSTALL_SCRIPT_NAMES[artifact.ecosystem]
    classified = []
    for package_file in artifact.files:
        extension = file_extension(package_file.basename)
        if package_file.basename.lower() == install_name:
            role = FileRole.INSTALL_SCRIPT
        else:
            role = ROLE_BY_EXTENSION.get(extension, FileRole.OTHER)
        classified.append(replace(package_file, extension=extension, role=role))
    return replace(artifact, files=tuple(classified))


def artifact_from_files(
        ecosystem,
        name: str,
        version: str,
        entries: Mapping[str, bytes] | Iterable[tuple[str, bytes]],
        source_path: str = "",
        distribution: str = "",
        max_file_bytes: int = MAX_FILE_BYTES,
) -> PackageArtifact:
    """
    Build a classified artifact from in-memory (path, bytes) pairs.

    Later duplicates of the same path replace earlier ones.
    """
    ecosystem = coerce_ecosystem(ecosystem)
    items = entries.items() if isinstance(entries, Mapping) else entries

    by_path: dict[str, PackageFile] = {}
    for entry_name, content in items:
        rel_path = safe_relative_path(entry_name)
        if not rel_path:
            continue
        size = len(content)
        truncated = size > max_file_bytes
        by_path[rel_path] = PackageFile(
            rel_path=rel_path,
            extension="",
            byte_size=size,
            content=b"" if truncated else bytes(content),
            truncated=truncated,
        )

    files = tuple(by_path[p] for p in sorted(by_path))
    artifact = PackageArtifact(
        ecosystem=ecosystem,
        name=name,
        version=version,
        files=files,
        source_path=source_path,
        distribution=distribution,
    )
    return classify_files(artifact)


def open_archive(
        path,
        ecosystem,
        name: str | None = None,
        version: str | None = None,
        max_total_bytes: int = MAX_TOTAL_BYTES,
        max_file_bytes: int = MAX_FILE_BYTES,
) -> PackageArtifact:
    """
    Open a package archive in memory.

    Args:
        path: .tgz / .tar.gz / .whl / .zip file (format sniffed when the suffix is unknown).
        ecosystem: npm or pypi; decides which install-script name counts.
        name, version: override the values read from the archive metadata.

    Raises:
        UnsupportedFormat, PathTraversal, SizeBombExceeded, CorruptArchive
    """
    path = os.fspath(path)
    ecosystem = coerce_ecosystem(ecosystem)
    if not os.path.isfile(path):
        raise FileNotFoundError(ERROR_MISSING_ARCHIVE.format(path=path))

    archive_format = _detect_format(path)
    budget = _SizeBudget(max_total_bytes, path)
    entries = _iter_tar_entries if archive_format == "tar" else _iter_zip_entries

    by_path: dict[str, PackageFile] = {}
    try:
        for rel_path, content, size, truncated in entries(path, budget, max_file_bytes):
            if rel_path in by_path:
                logger.warning("Duplicate entry %s in %s, keeping the last one", rel_path, path)
            by_path[rel_path] = PackageFile(
                rel_path=rel_path,
                extension="",
                byte_size=size,
                content=content,
                truncated=truncated,
            )
    except ArchiveError:
        raise
    except (tarfile.TarError, zipfile.BadZipFile, zlib.error, EOFError, OSError, ValueError, RuntimeError) as exc:
        raise CorruptArchive(ERROR_CORRUPT_ARCHIVE.format(path=path, error=exc)) from exc

    files = tuple(by_path[p] for p in sorted(by_path))
    meta_name, meta_version = _name_version_from_metadata(files, ecosystem)
    file_name, file_version = name_version_from_filename(path)

    artifact = PackageArtifact(
        ecosystem=ecosystem,
        name=name or meta_name or file_name,
        version=version or meta_version or file_version,
        files=files,
        source_path=path,
        distribution=_distribution_name(path, archive_format, ecosystem),
    )
    return classify_files(artifact)

