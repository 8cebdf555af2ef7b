"""
Business logic - Feature Extraction
===================================
Computes the language-independent FeatureVector of a package: install hook,
script/source sizes, URL/IP/base64/suspicious-token counts, GL4 entropy
statistics, homogeneity counts, symbol ratios and the extension census.
"""

import base64
import codecs
import hashlib
import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Iterable, Mapping, NamedTuple
from urllib.parse import quote

import numpy as np

from config.settings import BASE64_MIN_LENGTH, DEFAULT_DICTIONARY_FILE, DEFAULT_SCHEMA_FILE, MAX_FILE_BYTES, MAX_TOTAL_BYTES
from data.archives import SOURCE_ROLES, Ecosystem, FileRole, PackageArtifact, open_archive
from service.lexing_service import TokenKind, TokenStream, lex_artifact, lex_file

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Centralized messages
# ---------------------------------------------------------------------------

ERROR_SCHEMA_READ = "Cannot read feature schema {path}: {error}"
ERROR_SCHEMA_FIELD = "Feature schema is missing field '{field}'"
ERROR_SCHEMA_DUPLICATES = "Feature schema has duplicate names: {names}"
ERROR_SCHEMA_EXTENSIONS = "Feature schema must list exactly {expected} extensions, found {found}"
ERROR_SCHEMA_NAMES = "Feature schema names do not match the extractor (missing: {missing}; unknown: {unknown})"
ERROR_SCHEMA_MISMATCH = "Schema mismatch: expected {expected}, got {actual}"
ERROR_DICTIONARY_READ = "Cannot read keyword dictionary {path}: {error}"


class SchemaError(ValueError):
    """Malformed or inconsistent feature schema."""


class SchemaMismatch(ValueError):
    """Vectors, datasets or models bound to different schemas were combined."""


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------

EXTENSION_COUNT = 91
EXTENSION_PREFIX = "ext_"

SCALAR_FEATURES = (
    "has_install_hook",
    "install_words",
    "install_lines",
    "source_words",
    "source_lines",
    "num_urls",
    "num_ips",
    "num_suspicious_tokens",
    "num_base64_strings",
    "source_string_entropy_mean",
    "source_string_entropy_std",
    "source_string_entropy_q3",
    "source_string_entropy_max",
    "source_homogeneous_strings",
    "source_heterogeneous_strings",
    "source_identifier_entropy_mean",
    "source_identifier_entropy_std",
    "source_identifier_entropy_q3",
    "source_identifier_entropy_max",
    "source_homogeneous_identifiers",
    "source_heterogeneous_identifiers",
    "install_string_entropy_mean",
    "install_string_entropy_std",
    "install_string_entropy_q3",
    "install_string_entropy_max",
    "install_identifier_entropy_mean",
    "install_identifier_entropy_std",
    "install_identifier_entropy_q3",
    "install_identifier_entropy_max",
    "square_brackets_ratio_mean",
    "square_brackets_ratio_std",
    "square_brackets_ratio_q3",
    "square_brackets_ratio_max",
    "equals_ratio_mean",
    "equals_ratio_std",
    "equals_ratio_q3",
    "equals_ratio_max",
    "plus_ratio_mean",
    "plus_ratio_std",
    "plus_ratio_q3",
    "plus_ratio_max",
)


@dataclass(frozen=True)
class FeatureSchema:
    version: str
    names: tuple[str, ...]
    extension_list: tuple[str, ...]

    def canonical_document(self) -> dict:
        return {
            "version": self.version,
            "names": list(self.names),
            "extension_list": list(self.extension_list),
        }

    @cached_property
    def hash(self) -> str:
        payload = json.dumps(self.canonical_document(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class FeatureVector:
    schema_version: str
    schema_hash: str
    values: tuple[float, ...]

    def as_dict(self, schema: FeatureSchema) -> dict[str, float]:
        return dict(zip(schema.names, self.values))

    def __getitem__(self, index: int) -> float:
        return self.values[index]


def validate_schema(schema: FeatureSchema) -> None:
    """Raise SchemaError when the schema cannot be produced by the extractor."""
    duplicates = sorted(n for n, c in Counter(schema.names).items() if c > 1)
    if duplicates:
        raise SchemaError(ERROR_SCHEMA_DUPLICATES.format(names=", ".join(duplicates)))

    if len(schema.extension_list) != EXTENSION_COUNT or len(set(schema.extension_list)) != EXTENSION_COUNT:
        raise SchemaError(ERROR_SCHEMA_EXTENSIONS.format(
            expected=EXTENSION_COUNT, found=len(set(schema.extension_list))))

    expected = set(SCALAR_FEATURES) | {f"{EXTENSION_PREFIX}{e}" for e in schema.extension_list}
    actual = set(schema.names)
    if expected != actual:
        raise SchemaError(ERROR_SCHEMA_NAMES.format(
            missing=", ".join(sorted(expected - actual)) or "-",
            unknown=", ".join(sorted(actual - expected)) or "-",
        ))


def schema_from_document(document: Mapping) -> FeatureSchema:
    for key in ("version", "names", "extension_list"):
        if key not in document:
            raise SchemaError(ERROR_SCHEMA_FIELD.format(field=key))
    schema = FeatureSchema(
        version=str(document["version"]),
        names=tuple(str(n) for n in document["names"]),
        extension_list=tuple(str(e).lower() for e in document["extension_list"]),
    )
    validate_schema(schema)
    return schema


def load_schema(path=DEFAULT_SCHEMA_FILE) -> FeatureSchema:
    try:
        with open(path, encoding="utf-8") as handle:
            document = json.load(handle)
    except (OSError, ValueError) as exc:
        raise SchemaError(ERROR_SCHEMA_READ.format(path=path, error=exc)) from exc
    return schema_from_document(document)


def save_schema(schema: FeatureSchema, path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(schema.canonical_document(), handle, indent=2)
        handle.write("\n")


def default_schema() -> FeatureSchema:
    return load_schema(DEFAULT_SCHEMA_FILE)


def check_schema(expected_hash: str, actual_hash: str) -> None:
    if expected_hash != actual_hash:
        raise SchemaMismatch(ERROR_SCHEMA_MISMATCH.format(expected=expected_hash[:12], actual=actual_hash[:12]))


# ---------------------------------------------------------------------------
# GL4 encoding and entropy
# ---------------------------------------------------------------------------

class StatSummary(NamedTuple):
    mean: float
    std: float
    q3: float
    max: float


_EMPTY_STATS = StatSummary(0.0, 0.0, 0.0, 0.0)

_GL4_TABLE = {}
for _code in range(128):
    _char = chr(_code)
    if "a" <= _char <= "z":
        _GL4_TABLE[_code] = "L"
    elif "A" <= _char <= "Z":
        _GL4_TABLE[_code] = "U"
    elif "0" <= _char <= "9":
        _GL4_TABLE[_code] = "D"
    else:
        _GL4_TABLE[_code] = "S"


def gl4_encode(s: str) -> str:
    """Map every character to L, U, D or S (ASCII classes; everything else is S)."""
    return "".join(_GL4_TABLE.get(ord(c), "S") for c in s)


def shannon_entropy(pattern: str) -> float:
    if not pattern:
        return 0.0
    n = len(pattern)
    entropy = 0.0
    for count in Counter(pattern).values():
        p = count / n
        entropy -= p * math.log2(p)
    return entropy


def summary_stats(values: Iterable[float]) -> StatSummary:
    """Mean, population std, inclusive-linear Q3 and max; zeros for an empty population."""
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        return _EMPTY_STATS
    return StatSummary(
        mean=float(arr.mean()),
        std=float(arr.std()),
        q3=float(np.percentile(arr, 75)),
        max=float(arr.max()),
    )


def entropy_stats(items: Iterable[str]) -> StatSummary:
    return summary_stats(shannon_entropy(gl4_encode(item)) for item in items)


def homogeneity_counts(items: Iterable[str]) -> tuple[int, int]:
    """(homogeneous, heterogeneous) by number of distinct GL4 symbols."""
    homogeneous = 0
    total = 0
    for item in items:
        total += 1
        if len(set(gl4_encode(item))) <= 1:
            homogeneous += 1
    return homogeneous, total - homogeneous


# ---------------------------------------------------------------------------
# String-literal counters
# ---------------------------------------------------------------------------

_URL = re.compile(r"(?:https?|ftp|wss?)://[^\s'\"]+", re.IGNORECASE)
_OCTET = r"(?:25[0-5]|2[0-4]\d|1\d\d|[1-9]?\d)"
_IPV4 = re.compile(rf"(?<![\d.]){_OCTET}(?:\.{_OCTET}){{3}}(?![\d.])")
_BASE64_RUN = re.compile(r"[A-Za-z0-9+/]+={0,2}")


def count_urls(strings: Iterable[str]) -> int:
    return sum(len(_URL.findall(s)) for s in strings)


def count_ips(strings: Iterable[str]) -> int:
    return sum(len(_IPV4.findall(s)) for s in strings)


def _is_base64_run(run: str, min_length: int) -> bool:
    if len(run) < min_length or len(run) % 4:
        return False
    try:
        base64.b64decode(run, validate=True)
    except ValueError:
        return False
    return True


def count_base64(strings: Iterable[str], min_length: int = BASE64_MIN_LENGTH) -> int:
    """Number of strings holding at least one decodable base64 run."""
    return sum(
        1 for s in strings
        if any(_is_base64_run(m.group(), min_length) for m in _BASE64_RUN.finditer(s))
    )


# ---------------------------------------------------------------------------
# Sensitive dictionary
# ---------------------------------------------------------------------------

MIN_VARIANT_LENGTH = 4


@dataclass(frozen=True)
class SensitiveDictionary:
    entries: tuple[tuple[str, frozenset[str]], ...] = field(default_factory=tuple)

    @property
    def keywords(self) -> list[str]:
        return [keyword for keyword, _ in self.entries]

    def variants_of(self, keyword: str) -> frozenset[str]:
        for entry_keyword, variants in self.entries:
            if entry_keyword == keyword:
                return variants
        return frozenset()

    def __contains__(self, variant: str) -> bool:
        needle = variant.lower()
        return any(needle in variants for _, variants in self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def _radix_variants(raw: bytes, encoder, bits_per_char: int) -> set[str]:
    """
    Full encoding plus the stable cores of the encoding at byte shifts 0, 1, 2.

    A core drops the leading characters that mix in prefix bytes and the
    trailing character that mixes in whatever follows the keyword.
    """
    variants = {encoder(raw).decode("ascii")}
    for shift in (0, 1, 2):
        data = b"\x00" * shift + raw
        encoded = encoder(data).decode("ascii").rstrip("=")
        skip = math.ceil(8 * shift / bits_per_char)
        stable = (8 * len(data)) // bits_per_char
        core = encoded[skip:stable]
        if len(core) >= MIN_VARIANT_LENGTH:
            variants.add(core)
    return variants


def _keyword_variants(keyword: str) -> frozenset[str]:
    raw = keyword.encode("utf-8")
    variants = {keyword, codecs.encode(keyword, "rot13"), quote(keyword, safe="")}
    variants |= _radix_variants(raw, base64.b64encode, 6)
    variants |= _radix_variants(raw, base64.b32encode, 5)
    return frozenset(v.lower() for v in variants if v)


def expand_dictionary(keywords: Iterable[str]) -> SensitiveDictionary:
    seen = set()
    entries = []
    for keyword in keywords:
        keyword = keyword.strip()
        if not keyword or keyword in seen:
            continue
        seen.add(keyword)
        entries.append((keyword, _keyword_variants(keyword)))
    return SensitiveDictionary(entries=tuple(entries))


def read_keywords(path) -> list[str]:
    """One keyword per line; blank lines and `#` comments ignored."""
    try:
        with open(path, encoding="utf-8") as handle:
            lines = handle.read().splitlines()
    except OSError as exc:
        raise ValueError(ERROR_DICTIONARY_READ.format(path=path, error=exc)) from exc
    return [line.strip() for line in lines if line.strip() and not line.lstrip().startswith("#")]


def load_dictionary(path=DEFAULT_DICTIONARY_FILE) -> SensitiveDictionary:
    return expand_dictionary(read_keywords(path))


def count_suspicious(strings: Iterable[str], dictionary: SensitiveDictionary) -> int:
    """Case-insensitive hits; variants of one keyword at the same offset count once."""
    total = 0
    for s in strings:
        lowered = s.lower()
        for _, variants in dictionary.entries:
            offsets = set()
            for variant in variants:
                start = lowered.find(variant)
                while start >= 0:
                    offsets.add(start)
                    start = lowered.find(variant, start + 1)
            total += len(offsets)
    return total


# ---------------------------------------------------------------------------
# Artifact-level features
# ---------------------------------------------------------------------------

class SymbolClass(str, Enum):
    SQUARE_BRACKETS = "square_brackets"
    EQUALS = "equals"
    PLUS = "plus"


SYMBOL_BYTES = {
    SymbolClass.SQUARE_BRACKETS: (b"[", b"]"),
    SymbolClass.EQUALS: (b"=",),
    SymbolClass.PLUS: (b"+",),
}

INSTALL_HOOK_NAMES = frozenset({"install", "preinstall", "postinstall", "pre-install", "post-install"})


def symbol_ratio_stats(artifact: PackageArtifact, symbol_class: SymbolClass) -> StatSummary:
    """Per source file: symbol count over byte size. Files with dropped content are skipped."""
    symbols = SYMBOL_BYTES[SymbolClass(symbol_class)]
    ratios = [
        sum(f.content.count(sym) for sym in symbols) / f.byte_size
        for f in artifact.files_with_role(*SOURCE_ROLES)
        if f.byte_size > 0 and not f.truncated
    ]
    return summary_stats(ratios)


def _scripts_keys(stream: TokenStream) -> list[str]:
    """Keys of the top-level `scripts` object of a well-formed package.json stream."""
    keys = []
    frames: list[list] = []  # [bracket, key owning this container, current member key]
    tokens = stream.tokens
    for i, token in enumerate(tokens):
        if token.kind is TokenKind.PUNCTUATION and token.text in "{[":
            owner = frames[-1][2] if frames and frames[-1][0] == "{" else None
            frames.append([token.text, owner, None])
        elif token.kind is TokenKind.PUNCTUATION and token.text in "}]":
            if frames:
                frames.pop()
        elif token.kind is TokenKind.STRING and frames and frames[-1][0] == "{":
            following = tokens[i + 1] if i + 1 < len(tokens) else None
            if following is None or following.text != ":":
                continue
            frames[-1][2] = token.text
            if len(frames) == 2 and frames[1][1] == "scripts":
                keys.append(token.text)
    return keys


def detect_install_hook(artifact: PackageArtifact, tokens: Mapping[str, TokenStream]) -> bool:
    install_scripts = artifact.files_with_role(FileRole.INSTALL_SCRIPT)
    if artifact.ecosystem is Ecosystem.PYPI:
        return bool(install_scripts)

    for script in install_scripts:
        stream = tokens.get(script.rel_path) or lex_file(script)
        if stream is None:
            continue
        candidates = stream.strings if stream.lex_error else _scripts_keys(stream)
        if any(c.lower() in INSTALL_HOOK_NAMES for c in candidates):
            return True
    return False


def _words_and_lines(content: bytes) -> tuple[int, int]:
    text = content.decode("utf-8", errors="replace")
    lines = text.count("\n")
    if text and not text.endswith("\n"):
        lines += 1
    return len(text.split()), lines


def size_counts(artifact: PackageArtifact, tokens: Mapping[str, TokenStream] | None = None) -> tuple[int, int, int, int]:
    """(install_words, install_lines, source_words, source_lines) over raw decoded text."""
    install = [_words_and_lines(f.content) for f in artifact.files_with_role(FileRole.INSTALL_SCRIPT)]
    source = [_words_and_lines(f.content) for f in artifact.files_with_role(*SOURCE_ROLES)]
    return (
        sum(w for w, _ in install),
        sum(n for _, n in install),
        sum(w for w, _ in source),
        sum(n for _, n in source),
    )


def extension_census(artifact: PackageArtifact, schema: FeatureSchema) -> list[int]:
    counts = Counter(f.extension for f in artifact.files)
    return [counts.get(ext, 0) for ext in schema.extension_list]


def _put_stats(values: dict, prefix: str, stats: StatSummary) -> None:
    values[f"{prefix}_mean"] = stats.mean
    values[f"{prefix}_std"] = stats.std
    values[f"{prefix}_q3"] = stats.q3
    values[f"{prefix}_max"] = stats.max


def _pooled(streams: list[TokenStream], kind: TokenKind) -> list[str]:
    return [text for stream in streams for text in stream.texts(kind)]


def feature_values(
        artifact: PackageArtifact,
        schema: FeatureSchema,
        dictionary: SensitiveDictionary,
        tokens: Mapping[str, TokenStream] | None = None,
        base64_min_length: int = BASE64_MIN_LENGTH,
) -> dict[str, float]:
    """Named feature values (unordered); extract_features orders them by schema."""
    if tokens is None:
        tokens = lex_artifact(artifact)

    def streams_for(*roles):
        return [tokens[f.rel_path] for f in artifact.files_with_role(*roles) if f.rel_path in tokens]

    source_streams = streams_for(*SOURCE_ROLES)
    install_streams = streams_for(FileRole.INSTALL_SCRIPT)

    source_strings = _pooled(source_streams, TokenKind.STRING)
    source_identifiers = _pooled(source_streams, TokenKind.IDENTIFIER)
    install_strings = _pooled(install_streams, TokenKind.STRING)
    install_identifiers = _pooled(install_streams, TokenKind.IDENTIFIER)
    all_strings = source_strings + install_strings

    values: dict[str, float] = {"has_install_hook": 1.0 if detect_install_hook(artifact, tokens) else 0.0}

    install_words, install_lines, source_words, source_lines = size_counts(artifact, tokens)
    values["install_words"] = install_words
    values["install_lines"] = install_lines
    values["source_words"] = source_words
    values["source_lines"] = source_lines

    values["num_urls"] = count_urls(all_strings)
    values["num_ips"] = count_ips(all_strings)
    values["num_suspicious_tokens"] = count_suspicious(all_strings, dictionary)
    values["num_base64_strings"] = count_base64(all_strings, base64_min_length)

    _put_stats(values, "source_string_entropy", entropy_stats(source_strings))
    values["source_homogeneous_strings"], values["source_heterogeneous_strings"] = homogeneity_counts(source_strings)
    _put_stats(values, "source_identifier_entropy", entropy_stats(source_identifiers))
    values["source_homogeneous_identifiers"], values["source_heterogeneous_identifiers"] = (
        homogeneity_counts(source_identifiers)
    )
    _put_stats(values, "install_string_entropy", entropy_stats(install_strings))
    _put_stats(values, "install_identifier_entropy", entropy_stats(install_identifiers))

    for symbol_class in SymbolClass:
        _put_stats(values, f"{symbol_class.value}_ratio", symbol_ratio_stats(artifact, symbol_class))

    for ext, count in zip(schema.extension_list, extension_census(artifact, schema)):
        values[f"{EXTENSION_PREFIX}{ext}"] = count

    return values


def extract_features(
        artifact: PackageArtifact,
        schema: FeatureSchema,
        dictionary: SensitiveDictionary,
        tokens: Mapping[str, TokenStream] | None = None,
        base64_min_length: int = BASE64_MIN_LENGTH,
) -> FeatureVector:
    values = feature_values(artifact, schema, dictionary, tokens, base64_min_length)
    return FeatureVector(
        schema_version=schema.version,
        schema_hash=schema.hash,
        values=tuple(float(values[name]) for name in schema.names),
    )


def vectors_to_matrix(vectors: Iterable[FeatureVector]) -> np.ndarray:
    rows = [v.values for v in vectors]
    if not rows:
        return np.zeros((0, 0), dtype=float)
    return np.asarray(rows, dtype=float)


class ArchiveFeatures(NamedTuple):
    artifact: PackageArtifact
    vector: FeatureVector
    lex_error: bool


def extract_archive(
        path,
        ecosystem,
        schema: FeatureSchema,
        dictionary: SensitiveDictionary,
        name: str | None = None,
        version: str | None = None,
        max_total_bytes: int = MAX_TOTAL_BYTES,
        max_file_bytes: int = MAX_FILE_BYTES,
) -> ArchiveFeatures:
    """Open, lex and featurize one archive; archive errors propagate."""
    artifact = open_archive(
        path, ecosystem, name=name, version=version,
        max_total_bytes=max_total_bytes, max_file_bytes=max_file_bytes,
    )
    tokens = lex_artifact(artifact)
    vector = extract_features(artifact, schema, dictionary, tokens=tokens)
    lex_error = any(stream.lex_error for stream in tokens.values())
    if lex_error:
        logger.debug("Lexer recovered from errors in %s", path)
    return ArchiveFeatures(artifact, vector, lex_error)
