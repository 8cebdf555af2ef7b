from __future__ import annotations

import json
import os
import threading

import numpy as np
import pytest
import yaml

from conftest import npm_package_files, set_zip_method, write_tgz, write_zip
from data.archives import Ecosystem
from data.feeds import LocalDirectoryFeed
from models.ensemble import Label, TreeEnsembleModel
from models.params import LearnerKind, params_from_mapping
from models.tree import Tree
from service import scanner_service
from service.features_service import FeatureSchema, SchemaMismatch
from service.scanner_service import (
    AttachedModel,
    Disposition,
    ScanCaps,
    ScanConfigError,
    SeenCache,
    check_model_schemas,
    load_models,
    load_scan_config,
    run_from_config,
    run_watch,
    scan_package,
)


def _leaf_model(value: float, schema: FeatureSchema) -> TreeEnsembleModel:
    return TreeEnsembleModel(
        kind=LearnerKind.DT,
        trees=(Tree.leaf(value),),
        hyperparams=params_from_mapping("dt", {}),
        schema_version=schema.version,
        schema_hash=schema.hash,
        feature_names=schema.names,
    )


def _drop(root, name: str, version: str, malicious: bool, mtime: int):
    path = write_tgz(root / "npm" / f"{name}-{version}.tgz", npm_package_files(name, version, malicious))
    os.utime(path, ns=(mtime, mtime))
    return path


def _populate(drops) -> None:
    _drop(drops, "calm", "1.0.0", False, 1_000_000_000)
    _drop(drops, "evil", "1.0.0", True, 2_000_000_000)
    _drop(drops, "quiet", "2.0.0", False, 3_000_000_000)
    broken = drops / "npm" / "broken-0.1.0.tgz"
    broken.write_bytes(b"not an archive at all")
    os.utime(broken, ns=(4_000_000_000, 4_000_000_000))


def _sink_records(summary) -> list[dict]:
    with open(summary.sink_path, encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]


def _watch(tmp_path, models, schema, dictionary, **kwargs):
    sources = kwargs.pop("sources", None) or [LocalDirectoryFeed(tmp_path / "drops")]
    return run_watch(
        sources, models, tmp_path / "scans", tmp_path / "state", tmp_path / "downloads",
        schema, dictionary, **kwargs,
    )


# ---------------------------------------------------------------------------
# Single package
# ---------------------------------------------------------------------------

def test_scan_package_flags_mal_like(tmp_path, trained_model, schema, dictionary) -> None:
    path = write_tgz(tmp_path / "evil-1.0.0.tgz", npm_package_files("evil", "1.0.0", malicious=True))
    models = [AttachedModel("m", trained_model)]

    verdict = scan_package(path, "npm", models, schema, dictionary)

    assert verdict.disposition is Disposition.CLASSIFIED
    assert verdict.label is Label.MALICIOUS
    assert verdict.models[0].probability > 0.5
    assert verdict.top_features
    assert len(verdict.sha256) == 64
    assert verdict.as_record()["distribution"] == "tgz"


def test_scan_package_passes_benign_like(tmp_path, trained_model, schema, dictionary) -> None:
    path = write_tgz(tmp_path / "calm-1.0.0.tgz", npm_package_files("calm", "1.0.0", malicious=False))

    verdict = scan_package(path, Ecosystem.NPM, [AttachedModel("m", trained_model)], schema, dictionary)

    assert verdict.label is Label.BENIGN
    assert not verdict.flagged


def test_scan_package_corrupt_archive_is_an_ingest_error(tmp_path, trained_model, schema, dictionary) -> None:
    path = tmp_path / "broken-0.1.0.tgz"
    path.write_bytes(b"garbage")

    verdict = scan_package(path, "npm", [AttachedModel("m", trained_model)], schema, dictionary)

    assert verdict.disposition is Disposition.INGEST_ERROR
    assert (verdict.name, verdict.version) == ("broken", "0.1.0")
    assert verdict.label is None
    assert verdict.error


def test_scan_package_flags_when_any_model_flags(tmp_path, schema, dictionary) -> None:
    path = write_tgz(tmp_path / "calm-1.0.0.tgz", npm_package_files("calm", "1.0.0", malicious=False))
    models = [AttachedModel("lenient", _leaf_model(0.1, schema)), AttachedModel("strict", _leaf_model(0.8, schema))]

    verdict = scan_package(path, "npm", models, schema, dictionary)

    assert verdict.label is Label.MALICIOUS
    assert [(r.model_id, r.label) for r in verdict.models] == [
        ("lenient", Label.BENIGN), ("strict", Label.MALICIOUS)]


def test_scan_package_without_applicable_model(tmp_path, trained_model, schema, dictionary) -> None:
    path = write_tgz(tmp_path / "calm-1.0.0.tgz", npm_package_files("calm", "1.0.0", malicious=False))
    pypi_only = AttachedModel("pypi", trained_model, frozenset({Ecosystem.PYPI}))

    verdict = scan_package(path, "npm", [pypi_only], schema, dictionary)

    assert verdict.disposition is Disposition.NO_MODEL


def test_scan_package_size_caps(tmp_path, trained_model, schema, dictionary) -> None:
    path = write_tgz(tmp_path / "evil-1.0.0.tgz", npm_package_files("evil", "1.0.0", malicious=True))

    verdict = scan_package(path, "npm", [AttachedModel("m", trained_model)], schema, dictionary,
                           caps=ScanCaps(total_bytes=100))

    assert verdict.disposition is Disposition.INGEST_ERROR


def test_scan_package_unsupported_zip_compression_is_an_ingest_error(tmp_path, trained_model, schema,
                                                                     dictionary) -> None:
    wheel = write_zip(tmp_path / "odd-1.0-py3-none-any.whl", {
        "odd/__init__.py": "VALUE = 1\n",
        "odd-1.0.dist-info/METADATA": "Name: odd\nVersion: 1.0\n",
    })
    set_zip_method(wheel, 99)

    verdict = scan_package(wheel, "pypi", [AttachedModel("m", trained_model)], schema, dictionary)

    assert verdict.disposition is Disposition.INGEST_ERROR
    assert verdict.label is None


def test_models_must_share_the_schema(trained_model, schema) -> None:
    other = FeatureSchema(version="other", names=schema.names, extension_list=schema.extension_list)

    with pytest.raises(SchemaMismatch):
        check_model_schemas([AttachedModel("a", trained_model), AttachedModel("b", _leaf_model(0.5, other))])


# ---------------------------------------------------------------------------
# Watch loop
# ---------------------------------------------------------------------------

def test_run_once_scans_every_drop(tmp_path, trained_model, schema, dictionary) -> None:
    _populate(tmp_path / "drops")

    summary = _watch(tmp_path, [AttachedModel("m", trained_model)], schema, dictionary,
                     once=True, workers=2, run_id="first")
    records = _sink_records(summary)

    assert [r["name"] for r in records] == ["calm", "evil", "quiet", "broken"]
    assert [r["disposition"] for r in records][-1] == "ingest_error"
    assert [r["label"] for r in records[:3]] == ["benign", "malicious", "benign"]
    assert summary.counts["npm"] == {"scanned": 4, "benign": 2, "flagged": 1, "errors": 1}
    assert os.path.basename(summary.sink_path).startswith("scan-")
    assert os.listdir(tmp_path / "downloads" / "npm") == []


def test_rerun_scans_nothing_new(tmp_path, trained_model, schema, dictionary) -> None:
    _populate(tmp_path / "drops")
    models = [AttachedModel("m", trained_model)]
    _watch(tmp_path, models, schema, dictionary, once=True, run_id="first")

    again = _watch(tmp_path, models, schema, dictionary, once=True, run_id="second")

    assert again.total("scanned") == 0
    assert _sink_records(again) == []


def test_seen_cache_skips_rescans_after_lost_cursor(tmp_path, trained_model, schema, dictionary) -> None:
    _populate(tmp_path / "drops")
    models = [AttachedModel("m", trained_model)]
    _watch(tmp_path, models, schema, dictionary, once=True, run_id="first")
    os.unlink(tmp_path / "state" / "cursors.json")

    again = _watch(tmp_path, models, schema, dictionary, once=True, run_id="second")

    assert again.total("scanned") == 0
    assert again.skipped == 4


def test_two_models_are_reported_per_verdict(tmp_path, trained_model, schema, dictionary) -> None:
    _populate(tmp_path / "drops")
    models = [AttachedModel("gbt", trained_model), AttachedModel("never", _leaf_model(0.0, schema))]

    summary = _watch(tmp_path, models, schema, dictionary, once=True, run_id="pair")
    evil = next(r for r in _sink_records(summary) if r["name"] == "evil")

    assert [m["model_id"] for m in evil["models"]] == ["gbt", "never"]
    assert evil["label"] == "malicious"


def test_unexpected_worker_failure_becomes_an_ingest_error(tmp_path, trained_model, schema, dictionary,
                                                           monkeypatch) -> None:
    _populate(tmp_path / "drops")
    real_extract = scanner_service.extract_archive

    def failing_extract(path, *args, **kwargs):
        if kwargs.get("name") == "evil":
            raise KeyError("boom")
        return real_extract(path, *args, **kwargs)

    monkeypatch.setattr(scanner_service, "extract_archive", failing_extract)

    summary = _watch(tmp_path, [AttachedModel("m", trained_model)], schema, dictionary,
                     once=True, workers=2, run_id="failing")
    records = {r["name"]: r for r in _sink_records(summary)}

    assert sorted(records) == ["broken", "calm", "evil", "quiet"]
    assert records["evil"]["disposition"] == "ingest_error"
    assert records["evil"]["error"].startswith("KeyError")
    assert records["calm"]["disposition"] == "classified"
    assert summary.counts["npm"] == {"scanned": 4, "benign": 2, "flagged": 0, "errors": 2}


def test_twenty_drops_with_corrupt_and_oversize_archives(tmp_path, trained_model, schema, dictionary) -> None:
    drops = tmp_path / "drops"
    for i in range(18):
        _drop(drops, f"pkg{i:02d}", "1.0.0", i % 2 == 1, 1_000_000_000 + i * 1_000_000)
    broken = drops / "npm" / "broken-0.1.0.tgz"
    broken.write_bytes(b"not an archive at all")
    os.utime(broken, ns=(1_100_000_000, 1_100_000_000))
    huge = write_tgz(drops / "npm" / "huge-1.0.0.tgz", {
        "package.json": json.dumps({"name": "huge", "version": "1.0.0"}),
        "blob.bin": np.random.default_rng(0).bytes(300_000),
    })
    os.utime(huge, ns=(1_200_000_000, 1_200_000_000))
    models = [AttachedModel("m", trained_model)]
    caps = ScanCaps(download_bytes=100_000)

    summary = _watch(tmp_path, models, schema, dictionary, once=True, workers=4, run_id="twenty", caps=caps)
    records = _sink_records(summary)
    dispositions = {r["name"]: r["disposition"] for r in records}

    assert len(records) == 20
    assert dispositions["broken"] == "ingest_error"
    assert dispositions["huge"] == "download_error"
    counts = summary.counts["npm"]
    assert counts["scanned"] == 20
    assert counts["benign"] + counts["flagged"] + counts["errors"] == 20
    assert counts["errors"] == 2
    assert counts["flagged"] == 9

    again = _watch(tmp_path, models, schema, dictionary, once=True, run_id="twenty-again", caps=caps)

    assert again.total("scanned") == 0
    assert _sink_records(again) == []


class _StopAfterPoll(LocalDirectoryFeed):
    """Sets the stop event right after handing out a batch."""

    def __init__(self, path, stop_event):
        super().__init__(path)
        self.stop_event = stop_event

    def poll(self, since):
        result = super().poll(since)
        self.stop_event.set()
        return result


def test_stop_drains_and_leaves_cancelled_packages_for_next_run(tmp_path, trained_model, schema, dictionary) -> None:
    _populate(tmp_path / "drops")
    models = [AttachedModel("m", trained_model)]
    stop = threading.Event()

    first = _watch(tmp_path, models, schema, dictionary, workers=1, run_id="first", stop_event=stop,
                   sources=[_StopAfterPoll(tmp_path / "drops", stop)])
    second = _watch(tmp_path, models, schema, dictionary, once=True, run_id="second")

    assert first.total("scanned") + first.cancelled == 4
    assert first.total("scanned") == len(_sink_records(first))
    assert first.total("scanned") + second.total("scanned") == 4
    names = [r["name"] for r in _sink_records(first) + _sink_records(second)]
    assert sorted(names) == ["broken", "calm", "evil", "quiet"]


def test_missing_feed_directory_is_retried_not_fatal(tmp_path, trained_model, schema, dictionary) -> None:
    summary = _watch(tmp_path, [AttachedModel("m", trained_model)], schema, dictionary, once=True, run_id="none")

    assert summary.total("scanned") == 0


def test_seen_cache_persists(tmp_path) -> None:
    path = tmp_path / "state" / "seen.tsv"
    cache = SeenCache(path)
    cache.add(("npm", "a", "1.0.0"))
    cache.add(("npm", "a", "1.0.0"))
    cache.close()

    reopened = SeenCache(path)

    assert ("npm", "a", "1.0.0") in reopened
    assert ("npm", "a", "1.0.1") not in reopened
    reopened.close()
    assert path.read_text(encoding="utf-8") == "npm\ta\t1.0.0\n"


def test_seen_cache_escapes_separators_in_fields(tmp_path) -> None:
    path = tmp_path / "state" / "seen.tsv"
    odd = [("npm", "tab\tname", "1.0.0"), ("pypi", "line\nbreak", "2\r0"), ("npm", "back\\slash", "1\\t")]
    cache = SeenCache(path)
    for triple in odd:
        cache.add(triple)
    cache.close()

    reopened = SeenCache(path)

    assert all(triple in reopened for triple in odd)
    assert ("npm", "back\tslash", "1\\t") not in reopened
    reopened.close()
    lines = path.read_bytes().split(b"\n")
    assert lines[-1] == b""
    assert len(lines) == 4
    assert all(line.count(b"\t") == 2 for line in lines[:-1])


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _write_config(tmp_path, model_path, **overrides) -> str:
    document = {
        "sources": [{"kind": "local", "path": str(tmp_path / "drops")}],
        "models": [{"id": "m", "path": str(model_path), "ecosystems": ["npm"]}],
        "output_dir": str(tmp_path / "scans"),
        "state_dir": str(tmp_path / "state"),
        "download_dir": str(tmp_path / "downloads"),
        "workers": 2,
        "caps": {"file_bytes": 4096},
        **overrides,
    }
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(document), encoding="utf-8")
    return str(path)


def test_load_scan_config(tmp_path, model_file) -> None:
    config = load_scan_config(_write_config(tmp_path, model_file))

    assert config.workers == 2
    assert config.caps.file_bytes == 4096
    assert config.caps.total_bytes == ScanCaps().total_bytes
    assert config.models[0]["ecosystems"] == ["npm"]


@pytest.mark.parametrize(
    "overrides",
    [
        {"models": []},
        {"workers": 0},
        {"sources": [{"kind": "ftp"}]},
        {"sources": [{"kind": "local"}]},
        {"caps": {"total_bytes": -1}},
        {"colour": "blue"},
    ],
)
def test_invalid_scan_configs(tmp_path, model_file, overrides) -> None:
    with pytest.raises(ScanConfigError):
        load_scan_config(_write_config(tmp_path, model_file, **overrides))


def test_missing_config_and_model_files(tmp_path, schema) -> None:
    with pytest.raises(FileNotFoundError):
        load_scan_config(tmp_path / "absent.yaml")
    with pytest.raises(FileNotFoundError):
        load_models([{"id": "m", "path": str(tmp_path / "absent.json")}], schema)


def test_duplicate_model_ids_are_rejected(model_file, schema) -> None:
    entry = {"id": "m", "path": str(model_file)}

    with pytest.raises(ScanConfigError):
        load_models([entry, entry], schema)


def test_run_from_config(tmp_path, model_file) -> None:
    _populate(tmp_path / "drops")
    config = load_scan_config(_write_config(tmp_path, model_file))

    summary = run_from_config(config, once=True, run_id="cfg")

    assert summary.total("scanned") == 4
    assert summary.total("flagged") == 1
