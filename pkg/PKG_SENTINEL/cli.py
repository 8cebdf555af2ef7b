"""
Package Sentinel command line
=============================
    python cli.py [-v|-q] <command> ...

Commands: extract, build-dataset, train, evaluate, tune, scan, watch, report.

Exit codes: 0 ok, 2 some packages failed, 64 usage, 66 missing input,
74 I/O error.
"""

import argparse
import json
import logging
import os
import signal
import sys
import threading

import pandas as pd
from tqdm import tqdm

from config.settings import (
    CV_DEFAULTS,
    DEFAULT_DICTIONARY_FILE,
    DEFAULT_SCHEMA_FILE,
    EXIT_CODES,
    TUNING_DEFAULTS,
    configure_logging,
)
from data.archives import Ecosystem, is_archive_path
from data.loaders import (
    FeatureTableError,
    SettingsFileError,
    dump_settings_file,
    list_sink_files,
    load_benign_manifest,
    load_campaign_map,
    load_settings_file,
    read_feature_table,
    read_provenance,
    read_sink_records,
    write_feature_table,
    write_provenance,
)
from data.processors import UNLABELED, build_feature_frame
from data.validators import validate_hyperparams, validate_ratio
from models.ensemble import Label
from models.params import LearnerKind, params_from_mapping, params_to_mapping
from models.serialization import ModelFileError, save_model
from service.dataset_service import (
    DatasetError,
    assemble,
    build_corpus_samples,
    dataset_from_frame,
    dataset_to_frame,
    dedup_malicious_trace,
    featurize_entries,
    feature_distribution_report,
    fetch_benign_corpus,
    merge_cross,
)
from service.features_service import SchemaError, SchemaMismatch, load_dictionary, load_schema
from service.report_service import (
    build_scan_report,
    experiment_frame,
    experiment_table,
    experiments_document,
    run_experiment_grid,
)
from service.scanner_service import ScanConfigError, load_scan_config, run_from_config
from service.training_service import TrainingDataError, train_model
from service.tuning_service import CVConfig, TuningError, optimize_hyperparams, space_from_document
from utils.excel_exporter import export_experiment_report, export_scan_report, save_workbook
from utils.file_helpers import write_json

logger = logging.getLogger("pkg_sentinel.cli")

EXIT_OK = EXIT_CODES["ok"]
EXIT_PARTIAL = EXIT_CODES["partial"]
EXIT_USAGE = EXIT_CODES["usage"]
EXIT_NO_INPUT = EXIT_CODES["no_input"]
EXIT_IO = EXIT_CODES["io"]

ECOSYSTEMS = [e.value for e in Ecosystem]
LEARNERS = [k.value for k in LearnerKind]


class UsageError(Exception):
    pass


class MissingInput(Exception):
    pass


class SentinelArgumentParser(argparse.ArgumentParser):
    """argparse parser whose usage errors exit with 64."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _require_file(path, what: str = "input") -> str:
    if not os.path.isfile(path):
        raise MissingInput(f"{what} not found: {path}")
    return path


def _progress(total: int, desc: str, quiet: bool):
    return tqdm(total=total, desc=desc, unit="pkg", disable=quiet, file=sys.stderr)


def _load_schema_and_dictionary(args):
    schema = load_schema(_require_file(args.schema, "schema"))
    dictionary = load_dictionary(_require_file(args.dictionary, "dictionary"))
    return schema, dictionary


def _load_dataset(path, schema):
    df = read_feature_table(_require_file(path, "dataset"), schema.names)
    return dataset_from_frame(df, schema, read_provenance(path))


def _load_hyperparams(kind, path):
    if path is None:
        return None
    document = load_settings_file(_require_file(path, "hyperparameter file")) or {}
    is_valid, message = validate_hyperparams(kind, document)
    if not is_valid:
        raise UsageError(message)
    return params_from_mapping(kind, document)


def _cv_config(args) -> CVConfig:
    try:
        return CVConfig(k=args.folds, repeats=args.repeats, seed=args.seed).validate()
    except TuningError as exc:
        raise UsageError(str(exc)) from exc


def _write_table(df: pd.DataFrame, path) -> None:
    if path.lower().endswith(".json"):
        write_json(path, json.loads(df.to_json(orient="records")))
    else:
        df.to_csv(path, index=False, lineterminator="\n")


def _print_table(df: pd.DataFrame) -> None:
    if df.empty:
        print("(no rows)")
    else:
        print(df.to_string(index=False))


def _archives_under(path) -> list[str]:
    if os.path.isfile(path):
        return [path]
    found = []
    for root, _dirs, files in os.walk(path):
        found.extend(os.path.join(root, f) for f in files if is_archive_path(f))
    return sorted(found)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_extract(args) -> int:
    if not os.path.exists(args.path):
        raise MissingInput(f"input not found: {args.path}")
    schema, dictionary = _load_schema_and_dictionary(args)
    archives = _archives_under(args.path)

    with _progress(len(archives), "extract", args.quiet) as progress:
        records = featurize_entries(
            ((args.ecosystem, None, None, path) for path in archives),
            schema, dictionary, label=args.label, progress=progress,
        )
    frame = build_feature_frame(records, schema.names)
    if args.output:
        write_feature_table(frame, args.output)
    else:
        frame.to_csv(sys.stdout, index=False, lineterminator="\n")

    failed = sum(1 for record in records if record["error"])
    logger.info("Extracted %d packages (%d failed)", len(records) - failed, failed)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_build_dataset(args) -> int:
    schema, dictionary = _load_schema_and_dictionary(args)

    if args.merge:
        first, second = (_load_dataset(path, schema) for path in args.merge)
        dataset = merge_cross(first, second)
        write_feature_table(dataset_to_frame(dataset), args.output)
        write_provenance(args.output, dataset.provenance)
        logger.info("Merged %d + %d samples into %s", len(first), len(second), args.output)
        return EXIT_OK

    if not args.malicious_dir or not args.benign_dir:
        raise UsageError("--malicious-dir and --benign-dir are required unless --merge is given")
    is_valid, message = validate_ratio(args.ratio)
    if not is_valid:
        raise UsageError(message)
    for directory in (args.malicious_dir, args.benign_dir):
        if not os.path.isdir(directory) and not (directory == args.benign_dir and args.fetch_benign):
            raise MissingInput(f"directory not found: {directory}")

    ecosystems = [args.ecosystem] if args.ecosystem else None
    campaigns = load_campaign_map(_require_file(args.campaign_map, "campaign map")) if args.campaign_map else {}
    manifest = load_benign_manifest(_require_file(args.benign_manifest, "manifest")) if args.benign_manifest else None

    if args.fetch_benign:
        if manifest is None:
            raise UsageError("--fetch-benign needs --benign-manifest")
        with _progress(len(manifest), "fetch", args.quiet) as progress:
            fetch_benign_corpus(manifest, args.benign_dir, progress=progress)

    with _progress(None, "malicious", args.quiet) as progress:
        malicious, malicious_records = build_corpus_samples(
            args.malicious_dir, schema, dictionary, Label.MALICIOUS, ecosystems, campaigns=campaigns, progress=progress)
    with _progress(None, "benign", args.quiet) as progress:
        benign, benign_records = build_corpus_samples(
            args.benign_dir, schema, dictionary, Label.BENIGN, ecosystems, manifest=manifest, progress=progress)

    survivors, funnel = dedup_malicious_trace(malicious)
    provenance = {
        "malicious_dir": os.path.abspath(args.malicious_dir),
        "benign_dir": os.path.abspath(args.benign_dir),
        "campaign_map": args.campaign_map,
        "benign_manifest": args.benign_manifest,
        "ecosystem": args.ecosystem,
        "dedup_funnel": funnel,
        "extraction_errors": sum(1 for r in malicious_records + benign_records if r["error"]),
    }
    dataset = assemble(benign, survivors, schema, args.ratio, provenance)
    write_feature_table(dataset_to_frame(dataset), args.output)
    write_provenance(args.output, dataset.provenance)
    if args.report:
        _write_table(feature_distribution_report(dataset), args.report)
    print(f"{dataset.n_malicious} malicious + {dataset.n_benign} benign -> {args.output}")
    return EXIT_OK


def cmd_train(args) -> int:
    schema = load_schema(_require_file(args.schema, "schema"))
    kind = LearnerKind(args.learner)
    hp = _load_hyperparams(kind, args.hp)
    dataset = _load_dataset(args.dataset, schema)

    model = train_model(kind, dataset.matrix(), dataset.labels(), hp, seed=args.seed, schema=schema,
                        decision_threshold=args.threshold)
    save_model(model, args.output)
    if model.degenerate:
        logger.warning("Model trained on a single class; it predicts a constant")
    print(f"{kind.value} model with {len(model.trees)} trees -> {args.output}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    schema = load_schema(_require_file(args.schema, "schema"))
    if args.hp and not args.learner:
        raise UsageError("--hp needs --learner")
    learners = [LearnerKind(args.learner)] if args.learner else list(LearnerKind)
    hyperparams = {learners[0]: _load_hyperparams(learners[0], args.hp)} if args.hp else {}
    cv = _cv_config(args)
    dataset = _load_dataset(args.dataset, schema)

    with _progress(None, "cross-validation", args.quiet) as progress:
        rows = run_experiment_grid(dataset, learners, hyperparams, cv, progress=lambda _row: progress.update(1))

    table = experiment_table(rows)
    _print_table(table)
    if args.output:
        lowered = args.output.lower()
        if lowered.endswith(".xlsx"):
            details = {"Dataset": args.dataset, "Folds": cv.k, "Repeats": cv.repeats, "Seed": cv.seed}
            save_workbook(export_experiment_report(table, experiment_frame(rows), details), args.output)
        elif lowered.endswith(".csv"):
            _write_table(experiment_frame(rows), args.output)
        else:
            write_json(args.output, experiments_document(rows))
    return EXIT_OK


def cmd_tune(args) -> int:
    schema = load_schema(_require_file(args.schema, "schema"))
    kind = LearnerKind(args.learner)
    space = None
    if args.space:
        try:
            space = space_from_document(load_settings_file(_require_file(args.space, "search space")))
        except TuningError as exc:
            raise UsageError(str(exc)) from exc
    if args.budget < 1:
        raise UsageError("--budget must be at least 1")
    cv = _cv_config(args)
    dataset = _load_dataset(args.dataset, schema)

    best, report, _trials = optimize_hyperparams(
        dataset, kind, space=space, budget=args.budget, strategy=args.strategy,
        cv=cv, seed=args.seed, trial_log_path=args.trial_log,
    )
    document = params_to_mapping(best)
    print(f"best precision {report.precision.formatted()}  recall {report.recall.formatted()}")
    print(json.dumps(document, sort_keys=True))
    if args.output:
        dump_settings_file(args.output, document)
    return EXIT_OK


def _run_scan(args, once: bool) -> int:
    if args.config and not os.path.isfile(args.config):
        raise MissingInput(f"config not found: {args.config}")
    config = load_scan_config(args.config)

    stop_event = threading.Event()
    previous = None
    if threading.current_thread() is threading.main_thread():
        def request_stop(signum, frame):
            logger.warning("Interrupted; finishing packages in progress")
            stop_event.set()

        previous = signal.signal(signal.SIGINT, request_stop)
    try:
        summary = run_from_config(config, stop_event=stop_event, once=once, run_id=args.run_id)
    finally:
        if previous is not None:
            signal.signal(signal.SIGINT, previous)

    print(json.dumps(summary.as_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_scan(args) -> int:
    return _run_scan(args, once=True)


def cmd_watch(args) -> int:
    return _run_scan(args, once=False)


def cmd_report(args) -> int:
    paths = []
    for path in args.sinks:
        if os.path.isdir(path):
            paths.extend(list_sink_files(path))
        else:
            paths.append(_require_file(path, "sink"))

    report = build_scan_report(read_sink_records(paths))
    _print_table(report["counts"])
    print()
    _print_table(report["models"])
    if args.output:
        if args.output.lower().endswith(".xlsx"):
            save_workbook(export_scan_report(report, {"Sinks": len(paths)}), args.output)
        else:
            _write_table(report["models"], args.output)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_schema_flags(parser, dictionary: bool = True) -> None:
    parser.add_argument("--schema", default=DEFAULT_SCHEMA_FILE, help="feature schema JSON")
    if dictionary:
        parser.add_argument("--dictionary", default=DEFAULT_DICTIONARY_FILE, help="sensitive keyword list")


def _add_cv_flags(parser, repeats: int) -> None:
    parser.add_argument("--folds", type=int, default=CV_DEFAULTS["k"])
    parser.add_argument("--repeats", type=int, default=repeats)
    parser.add_argument("--seed", type=int, default=CV_DEFAULTS["seed"])


def build_parser() -> argparse.ArgumentParser:
    parser = SentinelArgumentParser(prog="pkg-sentinel", description="Malicious npm / PyPI package detection")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only, no progress bars")
    commands = parser.add_subparsers(dest="command", required=True, metavar="command")

    extract = commands.add_parser("extract", help="feature CSV for one archive or a directory of archives")
    extract.add_argument("path")
    extract.add_argument("--ecosystem", required=True, choices=ECOSYSTEMS)
    extract.add_argument("--label", default=UNLABELED, choices=["0", "1", UNLABELED])
    extract.add_argument("--output", help=".csv or .parquet (default: stdout)")
    _add_schema_flags(extract)
    extract.set_defaults(handler=cmd_extract)

    build = commands.add_parser("build-dataset", help="labeled feature table from corpora, or merge two tables")
    build.add_argument("--malicious-dir")
    build.add_argument("--campaign-map")
    build.add_argument("--benign-dir")
    build.add_argument("--benign-manifest")
    build.add_argument("--fetch-benign", action="store_true", help="download manifest packages missing locally")
    build.add_argument("--ecosystem", choices=ECOSYSTEMS)
    build.add_argument("--ratio", type=float, default=0.9, help="benign share of the dataset")
    build.add_argument("--merge", nargs=2, metavar=("A", "B"))
    build.add_argument("--report", help="per-feature distribution table (.csv or .json)")
    build.add_argument("--output", required=True)
    _add_schema_flags(build)
    build.set_defaults(handler=cmd_build_dataset)

    train = commands.add_parser("train", help="train and save a model")
    train.add_argument("--dataset", required=True)
    train.add_argument("--learner", required=True, choices=LEARNERS)
    train.add_argument("--hp", help="hyperparameter YAML/JSON")
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--threshold", type=float, default=0.5)
    train.add_argument("--output", required=True)
    _add_schema_flags(train, dictionary=False)
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser("evaluate", help="repeated stratified k-fold evaluation")
    evaluate.add_argument("--dataset", required=True)
    evaluate.add_argument("--learner", choices=LEARNERS, help="default: all learners")
    evaluate.add_argument("--hp")
    evaluate.add_argument("--output", help=".json, .csv or .xlsx")
    _add_cv_flags(evaluate, CV_DEFAULTS["repeats"])
    _add_schema_flags(evaluate, dictionary=False)
    evaluate.set_defaults(handler=cmd_evaluate)

    tune = commands.add_parser("tune", help="hyperparameter search maximizing precision")
    tune.add_argument("--dataset", required=True)
    tune.add_argument("--learner", required=True, choices=LEARNERS)
    tune.add_argument("--space", help="search space YAML/JSON")
    tune.add_argument("--budget", type=int, default=TUNING_DEFAULTS["budget"])
    tune.add_argument("--strategy", choices=["smbo", "random"], default=TUNING_DEFAULTS["strategy"])
    tune.add_argument("--trial-log")
    tune.add_argument("--output", help="best hyperparameters (YAML)")
    _add_cv_flags(tune, TUNING_DEFAULTS["repeats"])
    _add_schema_flags(tune, dictionary=False)
    tune.set_defaults(handler=cmd_tune)

    for name, handler, text in (("scan", cmd_scan, "poll every source once"),
                                ("watch", cmd_watch, "poll continuously until interrupted")):
        command = commands.add_parser(name, help=text)
        command.add_argument("--config", help="scan configuration (default: PKG_SENTINEL_CONFIG or bundled)")
        command.add_argument("--run-id")
        command.set_defaults(handler=handler)

    report = commands.add_parser("report", help="summarize scan sink files")
    report.add_argument("sinks", nargs="+", help="sink files or directories")
    report.add_argument("--output", help=".csv or .xlsx")
    report.set_defaults(handler=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(logging.DEBUG if args.verbose else logging.WARNING if args.quiet else None)

    try:
        return args.handler(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        logger.error("%s", exc)
        return EXIT_USAGE
    except (MissingInput, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_NO_INPUT
    except (SettingsFileError, ScanConfigError, SchemaMismatch, DatasetError, TrainingDataError, TuningError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except (FeatureTableError, SchemaError, ModelFileError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
