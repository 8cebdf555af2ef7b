"""
Model files
===========
Portable JSON model documents.

Reals are written with Python's shortest round-trip ``repr``, which always
reproduces the exact binary double and therefore carries at least the
precision of a 17-significant-digit rendering. Keys are sorted so the same
model always produces the same bytes.
"""

import json
import logging
import math
from typing import Mapping

import numpy as np

from config.settings import MODEL_FORMAT_VERSION
from models.ensemble import TreeEnsembleModel
from models.params import InvalidHyperparams, LearnerKind, ModelError, params_from_mapping, params_to_mapping
from models.tree import LEAF, Tree
from service.features_service import FeatureSchema, check_schema

logger = logging.getLogger(__name__)

ERROR_READ = "Cannot read model file {path}: {error}"
ERROR_WRITE = "Cannot write model file {path}: {error}"
ERROR_VERSION = "Unsupported model format version {found!r} (expected {expected})"
ERROR_HASH = "Model schema hash {stored} does not match its embedded schema ({computed})"
ERROR_MALFORMED = "Malformed model file: {detail}"

TREE_FIELDS = ("feature_index", "threshold", "left", "right", "leaf_value", "gain")


class ModelFileError(ModelError):
    pass


class VersionMismatch(ModelFileError):
    pass


class SchemaHashMismatch(ModelFileError):
    pass


class MalformedModelFile(ModelFileError):
    pass


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def _tree_to_dict(tree: Tree) -> dict:
    return {
        "feature_index": [int(v) for v in tree.feature_index],
        "threshold": [float(v) for v in tree.threshold],
        "left": [int(v) for v in tree.left],
        "right": [int(v) for v in tree.right],
        "leaf_value": [float(v) for v in tree.leaf_value],
        "gain": [float(v) for v in tree.gain],
    }


def model_to_dict(model: TreeEnsembleModel) -> dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": model.kind.value,
        "schema_version": model.schema_version,
        "schema_hash": model.schema_hash,
        "feature_names": list(model.feature_names),
        "extension_list": list(model.extension_list),
        "hyperparams": params_to_mapping(model.hyperparams),
        "decision_threshold": float(model.decision_threshold),
        "base_raw_score": float(model.base_raw_score),
        "degenerate": bool(model.degenerate),
        "training_loss": [float(v) for v in model.training_loss],
        "trees": [_tree_to_dict(tree) for tree in model.trees],
    }


def model_to_json(model: TreeEnsembleModel) -> str:
    return json.dumps(model_to_dict(model), sort_keys=True, indent=1, allow_nan=False) + "\n"


def save_model(model: TreeEnsembleModel, path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(model_to_json(model))
    except OSError as exc:
        raise ModelFileError(ERROR_WRITE.format(path=path, error=exc)) from exc
    logger.info("Saved %s model (%d trees) to %s", model.kind.value, len(model.trees), path)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def _malformed(detail: str) -> MalformedModelFile:
    return MalformedModelFile(ERROR_MALFORMED.format(detail=detail))


def _require(document: Mapping, key: str, kind):
    if key not in document:
        raise _malformed(f"missing field '{key}'")
    value = document[key]
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise _malformed(f"field '{key}' has the wrong type")
    return value


def _finite(value, key: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise _malformed(f"field '{key}' must be a finite number")
    return float(value)


def _tree_from_dict(raw, n_features: int, position: int) -> Tree:
    if not isinstance(raw, Mapping):
        raise _malformed(f"tree {position} is not an object")
    arrays = {}
    for key in TREE_FIELDS:
        values = _require(raw, key, list)
        arrays[key] = values
    sizes = {len(values) for values in arrays.values()}
    if len(sizes) != 1 or 0 in sizes:
        raise _malformed(f"tree {position} has inconsistent node arrays")
    n_nodes = sizes.pop()

    try:
        feature_index = np.asarray(arrays["feature_index"], dtype=np.int64)
        left = np.asarray(arrays["left"], dtype=np.int64)
        right = np.asarray(arrays["right"], dtype=np.int64)
        threshold = np.asarray([_finite(v, "threshold") for v in arrays["threshold"]], dtype=float)
        leaf_value = np.asarray([_finite(v, "leaf_value") for v in arrays["leaf_value"]], dtype=float)
        gain = np.asarray([_finite(v, "gain") for v in arrays["gain"]], dtype=float)
    except (TypeError, ValueError, OverflowError) as exc:
        raise _malformed(f"tree {position}: {exc}") from exc

    for node in range(n_nodes):
        feature = int(feature_index[node])
        if feature == LEAF:
            if left[node] != LEAF or right[node] != LEAF:
                raise _malformed(f"tree {position} leaf {node} has children")
            continue
        if not 0 <= feature < n_features:
            raise _malformed(f"tree {position} node {node} uses feature {feature} outside the schema")
        # Children after their parent keeps every path finite.
        for child in (left[node], right[node]):
            if not node < child < n_nodes:
                raise _malformed(f"tree {position} node {node} has an invalid child {child}")

    return Tree(feature_index, threshold, left, right, leaf_value, gain)


def model_from_dict(document, expected_schema: FeatureSchema | None = None) -> TreeEnsembleModel:
    if not isinstance(document, Mapping):
        raise _malformed("top level is not an object")

    version = document.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise VersionMismatch(ERROR_VERSION.format(found=version, expected=MODEL_FORMAT_VERSION))

    try:
        kind = LearnerKind(_require(document, "kind", str))
    except ValueError as exc:
        raise _malformed(f"unknown kind {document.get('kind')!r}") from exc

    names = tuple(str(n) for n in _require(document, "feature_names", list))
    extensions = tuple(str(e) for e in _require(document, "extension_list", list))
    schema_version = _require(document, "schema_version", str)
    stored_hash = _require(document, "schema_hash", str)
    computed = FeatureSchema(version=schema_version, names=names, extension_list=extensions).hash
    if stored_hash != computed:
        raise SchemaHashMismatch(ERROR_HASH.format(stored=stored_hash[:12], computed=computed[:12]))
    if expected_schema is not None:
        check_schema(expected_schema.hash, stored_hash)

    try:
        hyperparams = params_from_mapping(kind, _require(document, "hyperparams", Mapping))
    except (InvalidHyperparams, TypeError) as exc:
        raise _malformed(f"hyperparams: {exc}") from exc

    trees = tuple(
        _tree_from_dict(raw, len(names), position)
        for position, raw in enumerate(_require(document, "trees", list))
    )
    degenerate = _require(document, "degenerate", bool)
    if degenerate and len(trees) != 1:
        raise _malformed("degenerate models hold exactly one tree")
    if kind is not LearnerKind.GBT and not trees:
        raise _malformed(f"{kind.value} model has no trees")

    return TreeEnsembleModel(
        kind=kind,
        trees=trees,
        hyperparams=hyperparams,
        schema_version=schema_version,
        schema_hash=stored_hash,
        feature_names=names,
        extension_list=extensions,
        decision_threshold=_finite(_require(document, "decision_threshold", (int, float)), "decision_threshold"),
        base_raw_score=_finite(_require(document, "base_raw_score", (int, float)), "base_raw_score"),
        degenerate=degenerate,
        training_loss=tuple(_finite(v, "training_loss") for v in _require(document, "training_loss", list)),
    )


def model_from_json(text: str, expected_schema: FeatureSchema | None = None) -> TreeEnsembleModel:
    try:
        document = json.loads(text)
    except ValueError as exc:
        raise _malformed(str(exc)) from exc
    return model_from_dict(document, expected_schema)


def load_model(path, expected_schema: FeatureSchema | None = None) -> TreeEnsembleModel:
    try:
        with open(path, encoding="utf-8") as handle:
            text = handle.read()
    except UnicodeDecodeError as exc:
        raise _malformed(str(exc)) from exc
    except OSError as exc:
        raise ModelFileError(ERROR_READ.format(path=path, error=exc)) from exc
    return model_from_json(text, expected_schema)
