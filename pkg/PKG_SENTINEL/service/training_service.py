"""
Business logic - Model Training
===============================
Trains decision trees, random forests and gradient-boosted trees over feature
vectors, binds each model to its feature schema and applies models to new
vectors.
"""

import logging
from typing import Iterable, Mapping, Sequence

import numpy as np

from config.settings import DEFAULT_DECISION_THRESHOLD
from models.boosting import grow_boosted
from models.ensemble import Label, TreeEnsembleModel
from models.forest import grow_forest, grow_tree
from models.params import (
    BoostingParams,
    DecisionTreeParams,
    Hyperparams,
    LearnerKind,
    ModelError,
    RandomForestParams,
    coerce_kind,
    default_params,
    params_from_mapping,
)
from models.tree import Tree
from service.features_service import FeatureSchema, FeatureVector, SchemaMismatch, check_schema, default_schema

logger = logging.getLogger(__name__)

ERROR_SIZES = "Training data needs at least 2 rows with one label each (got {rows} rows, {labels} labels)"
ERROR_WIDTH = "Feature matrix has {found} columns but the schema has {expected}"
ERROR_MIXED_SCHEMAS = "Feature vectors come from more than one schema"
ERROR_PARAMS_KIND = "Expected {expected} for a {kind} model, got {found}"
ERROR_NOT_FINITE = "Feature matrix contains non-finite values"
MSG_DEGENERATE = "Only one class (%s) in %d training rows; returning a constant %s model"

ADHOC_SCHEMA_VERSION = "adhoc"


class TrainingDataError(ModelError, ValueError):
    pass


# ---------------------------------------------------------------------------
# Input binding
# ---------------------------------------------------------------------------

def adhoc_schema(n_features: int) -> FeatureSchema:
    """Schema for raw matrices trained without a feature schema."""
    return FeatureSchema(
        version=ADHOC_SCHEMA_VERSION,
        names=tuple(f"f{i}" for i in range(n_features)),
        extension_list=(),
    )


def bind_features(X, schema: FeatureSchema | None = None) -> tuple[np.ndarray, FeatureSchema]:
    """Turn FeatureVectors or a matrix into (matrix, schema), checking the binding."""
    if isinstance(X, np.ndarray):
        matrix = np.asarray(X, dtype=float)
        if matrix.ndim != 2:
            matrix = np.atleast_2d(matrix)
        schema = schema or adhoc_schema(matrix.shape[1])
    else:
        vectors = list(X)
        hashes = {v.schema_hash for v in vectors}
        if len(hashes) > 1:
            raise SchemaMismatch(ERROR_MIXED_SCHEMAS)
        schema = schema or default_schema()
        if hashes:
            check_schema(schema.hash, hashes.pop())
        matrix = np.asarray([v.values for v in vectors], dtype=float).reshape(len(vectors), len(schema))

    if matrix.shape[1] != len(schema):
        raise SchemaMismatch(ERROR_WIDTH.format(found=matrix.shape[1], expected=len(schema)))
    if not np.all(np.isfinite(matrix)):
        raise TrainingDataError(ERROR_NOT_FINITE)
    return matrix, schema


def labels_to_array(y: Iterable) -> np.ndarray:
    return np.asarray([Label.from_value(v).as_int for v in y], dtype=int)


def _resolve_params(kind: LearnerKind, hp) -> Hyperparams:
    if hp is None:
        return default_params(kind)
    if isinstance(hp, Mapping):
        return params_from_mapping(kind, hp)
    expected = {
        LearnerKind.DT: DecisionTreeParams,
        LearnerKind.RF: RandomForestParams,
        LearnerKind.GBT: BoostingParams,
    }[kind]
    if type(hp) is not expected:
        raise TrainingDataError(ERROR_PARAMS_KIND.format(
            expected=expected.__name__, kind=kind.value, found=type(hp).__name__))
    return hp.validate()


def _prepare(kind, X, y, hp, schema):
    kind = coerce_kind(kind)
    params = _resolve_params(kind, hp)
    matrix, schema = bind_features(X, schema)
    labels = labels_to_array(y)
    if matrix.shape[0] < 2 or matrix.shape[0] != labels.shape[0]:
        raise TrainingDataError(ERROR_SIZES.format(rows=matrix.shape[0], labels=labels.shape[0]))
    return kind, params, matrix, labels, schema


def _model(kind, trees, params, schema, **extra) -> TreeEnsembleModel:
    return TreeEnsembleModel(
        kind=kind,
        trees=tuple(trees),
        hyperparams=params,
        schema_version=schema.version,
        schema_hash=schema.hash,
        feature_names=tuple(schema.names),
        extension_list=tuple(schema.extension_list),
        **extra,
    )


def _degenerate_model(kind, params, labels, schema, threshold) -> TreeEnsembleModel | None:
    if labels.min() != labels.max():
        return None
    value = float(labels[0])
    logger.warning(MSG_DEGENERATE, Label.from_value(labels[0]).value, labels.shape[0], kind.value)
    return _model(kind, [Tree.leaf(value)], params, schema, degenerate=True, decision_threshold=threshold)


# ---------------------------------------------------------------------------
# Learners
# ---------------------------------------------------------------------------

def train_dt(X, y, hp=None, seed: int = 0, schema: FeatureSchema | None = None,
             decision_threshold: float = DEFAULT_DECISION_THRESHOLD) -> TreeEnsembleModel:
    kind, params, matrix, labels, schema = _prepare(LearnerKind.DT, X, y, hp, schema)
    degenerate = _degenerate_model(kind, params, labels, schema, decision_threshold)
    if degenerate is not None:
        return degenerate
    tree = grow_tree(matrix, labels, params, np.random.default_rng(seed))
    logger.debug("Decision tree with %d nodes", tree.n_nodes)
    return _model(kind, [tree], params, schema, decision_threshold=decision_threshold)


def train_rf(X, y, hp=None, seed: int = 0, schema: FeatureSchema | None = None,
             decision_threshold: float = DEFAULT_DECISION_THRESHOLD) -> TreeEnsembleModel:
    kind, params, matrix, labels, schema = _prepare(LearnerKind.RF, X, y, hp, schema)
    degenerate = _degenerate_model(kind, params, labels, schema, decision_threshold)
    if degenerate is not None:
        return degenerate
    trees = grow_forest(matrix, labels, params, seed)
    return _model(kind, trees, params, schema, decision_threshold=decision_threshold)


def train_gbt(X, y, hp=None, seed: int = 0, schema: FeatureSchema | None = None,
              decision_threshold: float = DEFAULT_DECISION_THRESHOLD) -> TreeEnsembleModel:
    kind, params, matrix, labels, schema = _prepare(LearnerKind.GBT, X, y, hp, schema)
    degenerate = _degenerate_model(kind, params, labels, schema, decision_threshold)
    if degenerate is not None:
        return degenerate
    trees, losses = grow_boosted(matrix, labels, params, seed)
    return _model(
        kind, trees, params, schema,
        decision_threshold=decision_threshold,
        base_raw_score=0.0,
        training_loss=tuple(losses),
    )


TRAINERS = {
    LearnerKind.DT: train_dt,
    LearnerKind.RF: train_rf,
    LearnerKind.GBT: train_gbt,
}


def train_model(kind, X, y, hp=None, seed: int = 0, schema: FeatureSchema | None = None,
                decision_threshold: float = DEFAULT_DECISION_THRESHOLD) -> TreeEnsembleModel:
    return TRAINERS[coerce_kind(kind)](X, y, hp, seed, schema, decision_threshold)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def _as_matrix(model: TreeEnsembleModel, vectors: Sequence) -> np.ndarray:
    if isinstance(vectors, np.ndarray):
        matrix = np.atleast_2d(np.asarray(vectors, dtype=float))
        if matrix.shape[1] != model.n_features:
            raise SchemaMismatch(ERROR_WIDTH.format(found=matrix.shape[1], expected=model.n_features))
        return matrix
    for vector in vectors:
        check_schema(model.schema_hash, vector.schema_hash)
    return np.asarray([v.values for v in vectors], dtype=float).reshape(len(vectors), model.n_features)


def predict(model: TreeEnsembleModel, x: FeatureVector) -> tuple[float, Label]:
    """Probability of the malicious class and the thresholded label."""
    probability = float(predict_proba(model, [x])[0])
    label = Label.MALICIOUS if probability > model.decision_threshold else Label.BENIGN
    return probability, label


def predict_proba(model: TreeEnsembleModel, vectors) -> np.ndarray:
    probabilities = model.predict_proba(_as_matrix(model, vectors))
    return np.clip(probabilities, 0.0, 1.0)


def predict_labels(model: TreeEnsembleModel, vectors) -> np.ndarray:
    return (predict_proba(model, vectors) > model.decision_threshold).astype(int)
