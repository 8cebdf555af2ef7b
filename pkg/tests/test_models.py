from __future__ import annotations

import json

import numpy as np
import pytest

from models.boosting import grow_boosted
from models.ensemble import Label, TreeEnsembleModel, feature_importance, top_features
from models.params import BoostingParams, InvalidHyperparams, LearnerKind, params_from_mapping
from models.serialization import (
    MalformedModelFile,
    ModelFileError,
    SchemaHashMismatch,
    VersionMismatch,
    load_model,
    model_from_json,
    model_to_dict,
    model_to_json,
    save_model,
)
from models.tree import LEAF, Tree
from service.features_service import FeatureSchema, FeatureVector, SchemaMismatch
from service.training_service import (
    TrainingDataError,
    adhoc_schema,
    predict,
    predict_labels,
    predict_proba,
    train_dt,
    train_gbt,
    train_model,
    train_rf,
)


def _gini(positive: float, total: float) -> float:
    p = positive / total
    q = 1.0 - p
    return 1.0 - p * p - q * q


def _oracle_best_score(X: np.ndarray, y: np.ndarray) -> float:
    """Lowest weighted child impurity over every (feature, midpoint) split."""
    best = np.inf
    for feature in range(X.shape[1]):
        values = np.unique(X[:, feature])
        for low, high in zip(values[:-1], values[1:]):
            left = X[:, feature] <= (low + high) / 2.0
            n_left, n_right = left.sum(), (~left).sum()
            score = n_left * _gini(y[left].sum(), n_left) + n_right * _gini(y[~left].sum(), n_right)
            best = min(best, score)
    return best


def _split_score(X: np.ndarray, y: np.ndarray, feature: int, threshold: float) -> float:
    left = X[:, feature] <= threshold
    n_left, n_right = left.sum(), (~left).sum()
    return n_left * _gini(y[left].sum(), n_left) + n_right * _gini(y[~left].sum(), n_right)


def _separable(n: int = 40, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    X = rng.normal(size=(n, 2))
    X[:, 0] += 10.0 * y
    return X, y


# ---------------------------------------------------------------------------
# Decision tree
# ---------------------------------------------------------------------------

def test_dt_root_threshold_on_one_feature() -> None:
    model = train_dt(np.array([[0.0], [1.0], [2.0], [3.0]]), [0, 0, 1, 1])
    tree = model.trees[0]

    assert tree.threshold[0] == 1.5
    assert tree.feature_index[0] == 0
    assert sorted(tree.leaf_value[tree.feature_index == LEAF]) == [0.0, 1.0]
    assert predict_proba(model, np.array([[0.0], [3.0]])).tolist() == [0.0, 1.0]


def test_dt_stump_matches_exhaustive_oracle() -> None:
    rng = np.random.default_rng(11)
    for _ in range(25):
        X = rng.integers(0, 5, size=(30, 3)).astype(float)
        y = rng.integers(0, 2, size=30)
        if y.min() == y.max():
            continue
        if all(np.unique(X[:, j]).size == 1 for j in range(3)):
            continue

        tree = train_dt(X, y, {"max_depth": 1}).trees[0]
        if tree.n_nodes == 1:
            continue

        chosen = _split_score(X, y, int(tree.feature_index[0]), float(tree.threshold[0]))
        assert chosen == pytest.approx(_oracle_best_score(X, y), abs=1e-9)


def _impurity(positive: float, total: float, criterion: str) -> float:
    p = positive / total
    if criterion == "gini":
        return 1.0 - p * p - (1.0 - p) ** 2
    log = np.log2 if criterion == "entropy" else np.log
    return -sum(share * float(log(share)) for share in (p, 1.0 - p) if share > 0)


def _criterion_score(X: np.ndarray, y: np.ndarray, feature: int, threshold: float, criterion: str) -> float:
    left = X[:, feature] <= threshold
    n_left, n_right = left.sum(), (~left).sum()
    return (n_left * _impurity(y[left].sum(), n_left, criterion)
            + n_right * _impurity(y[~left].sum(), n_right, criterion))


@pytest.mark.parametrize("criterion", ["gini", "entropy", "log_loss"])
def test_dt_stump_matches_exhaustive_oracle_for_each_criterion(criterion) -> None:
    rng = np.random.default_rng(29)
    checked = 0
    for _ in range(200):
        n = int(rng.integers(2, 13))
        n_features = int(rng.integers(1, 4))
        X = rng.integers(0, 4, size=(n, n_features)).astype(float)
        y = rng.integers(0, 2, size=n)
        if y.min() == y.max() or all(np.unique(X[:, j]).size == 1 for j in range(n_features)):
            continue

        tree = train_dt(X, y, {"max_depth": 1, "criterion": criterion}).trees[0]
        assert tree.n_nodes == 3

        best = min(
            _criterion_score(X, y, j, (low + high) / 2.0, criterion)
            for j in range(n_features)
            for low, high in zip(np.unique(X[:, j])[:-1], np.unique(X[:, j])[1:])
        )
        chosen = _criterion_score(X, y, int(tree.feature_index[0]), float(tree.threshold[0]), criterion)
        assert chosen == pytest.approx(best, abs=1e-9)
        checked += 1
    assert checked > 100


@pytest.mark.parametrize("factor", [0.001, 3.7, 1000.0])
def test_dt_predictions_survive_column_scaling(factor) -> None:
    rng = np.random.default_rng(31)
    for _ in range(20):
        X = rng.integers(0, 10, size=(40, 3)).astype(float)
        y = rng.integers(0, 2, size=40)
        column = int(rng.integers(0, 3))
        scaled = X.copy()
        scaled[:, column] *= factor

        plain = predict_labels(train_dt(X, y), X)
        rescaled = predict_labels(train_dt(scaled, y), scaled)

        assert plain.tolist() == rescaled.tolist()


def test_dt_xor_stump_uses_lowest_feature_on_ties() -> None:
    X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    y = np.array([0, 1, 1, 0])

    tree = train_dt(X, y, {"max_depth": 1}).trees[0]

    if tree.n_nodes > 1:
        assert tree.feature_index[0] == 0
        assert tree.threshold[0] == 0.5


def test_dt_single_class_is_degenerate() -> None:
    model = train_dt(np.array([[0.0], [1.0], [2.0]]), [1, 1, 1])

    assert model.degenerate
    assert len(model.trees) == 1 and model.trees[0].n_nodes == 1
    assert model.trees[0].leaf_value[0] == 1.0
    assert feature_importance(model) == {"f0": 0.0}


def test_invalid_hyperparams_are_rejected() -> None:
    with pytest.raises(InvalidHyperparams):
        params_from_mapping("dt", {"max_depth": 0})
    with pytest.raises(InvalidHyperparams):
        params_from_mapping("gbt", {"learning_rate": 0.0})
    with pytest.raises(InvalidHyperparams):
        params_from_mapping("rf", {"n_trees": 10})
    with pytest.raises(InvalidHyperparams):
        train_model("svm", np.zeros((2, 1)), [0, 1])


def test_training_input_errors() -> None:
    with pytest.raises(TrainingDataError):
        train_dt(np.array([[0.0]]), [1])
    with pytest.raises(TrainingDataError):
        train_dt(np.array([[0.0], [np.nan]]), [0, 1])


# ---------------------------------------------------------------------------
# Random forest
# ---------------------------------------------------------------------------

def test_rf_without_bootstrap_reduces_to_tree() -> None:
    X, y = _separable(seed=4)
    hp = {"n_estimators": 1, "bootstrap": False, "max_features": None}

    forest = train_rf(X, y, hp, seed=9)
    tree = train_dt(X, y, seed=9)

    np.testing.assert_array_equal(forest.trees[0].feature_index, tree.trees[0].feature_index)
    np.testing.assert_array_equal(forest.trees[0].threshold, tree.trees[0].threshold)
    np.testing.assert_array_equal(predict_proba(forest, X), predict_proba(tree, X))


def test_rf_separable_training_accuracy() -> None:
    X, y = _separable()

    model = train_rf(X, y, {"n_estimators": 25}, seed=1)

    assert (predict_labels(model, X) == y).all()


def test_rf_is_reproducible_for_a_seed() -> None:
    X, y = _separable(seed=2)

    first = predict_proba(train_rf(X, y, {"n_estimators": 10}, seed=5), X)
    second = predict_proba(train_rf(X, y, {"n_estimators": 10, "n_jobs": 4}, seed=5), X)

    np.testing.assert_array_equal(first, second)


# ---------------------------------------------------------------------------
# Gradient boosting
# ---------------------------------------------------------------------------

def test_gbt_single_round_leaf_weights() -> None:
    hp = BoostingParams(n_estimators=1, max_depth=1, learning_rate=1.0, gamma=0.0,
                        min_child_weight=0.0, l2_lambda=0.0)

    model = train_gbt(np.array([[0.0], [1.0]]), [0, 1], hp)
    tree = model.trees[0]

    assert tree.leaf_value.tolist() == pytest.approx([0.0, -2.0, 2.0])
    assert model.raw_scores(np.array([[0.0], [1.0]])).tolist() == pytest.approx([-2.0, 2.0])


def test_gbt_large_gamma_suppresses_splits() -> None:
    X, y = _separable(n=20)

    model = train_gbt(X, y, {"n_estimators": 5, "gamma": 1e6})

    assert all(tree.n_nodes == 1 for tree in model.trees)
    assert predict_proba(model, X) == pytest.approx(np.full(20, 0.5))


def test_gbt_training_loss_never_increases() -> None:
    X, y = _separable(n=30, seed=6)

    model = train_gbt(X, y, {"n_estimators": 10, "max_depth": 2})
    losses = np.array(model.training_loss)

    assert losses.size == 11
    assert losses[0] == pytest.approx(np.log(2.0))
    assert (np.diff(losses) <= 1e-12).all()


def test_gbt_with_zero_rounds_predicts_half(schema) -> None:
    X = np.zeros((2, len(schema)))
    X[1, 0] = 1.0
    model = train_gbt(X, [0, 1], {"n_estimators": 0}, schema=schema)
    vector = FeatureVector(schema.version, schema.hash, tuple(X[1]))

    assert predict(model, vector) == (0.5, Label.BENIGN)


def test_colsample_is_seeded() -> None:
    rng = np.random.default_rng(8)
    X = rng.normal(size=(50, 6))
    y = (X[:, 2] + X[:, 4] > 0).astype(int)
    params = BoostingParams(n_estimators=5, colsample_bytree=0.5)

    first, _ = grow_boosted(X, y, params, seed=3)
    second, _ = grow_boosted(X, y, params, seed=3)

    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.feature_index, b.feature_index)


# ---------------------------------------------------------------------------
# Prediction and importance
# ---------------------------------------------------------------------------

def _leaf_model(value: float, schema: FeatureSchema) -> TreeEnsembleModel:
    return TreeEnsembleModel(
        kind=LearnerKind.DT,
        trees=(Tree.leaf(value),),
        hyperparams=params_from_mapping("dt", {}),
        schema_version=schema.version,
        schema_hash=schema.hash,
        feature_names=schema.names,
    )


def test_predict_single_leaf() -> None:
    schema = adhoc_schema(2)
    model = _leaf_model(0.9, schema)

    assert predict(model, FeatureVector(schema.version, schema.hash, (0.0, 0.0))) == (0.9, Label.MALICIOUS)


def test_predict_rejects_foreign_schema() -> None:
    schema = adhoc_schema(2)
    model = train_rf(np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 2.0], [2.0, 0.0]]), [0, 1, 0, 1],
                     {"n_estimators": 3}, schema=schema)
    foreign = FeatureVector("other", "f" * 64, (0.0, 0.0))

    with pytest.raises(SchemaMismatch):
        predict(model, foreign)


def test_stump_predicts_leaf_values_on_training_points() -> None:
    X = np.array([[0.0], [1.0], [2.0], [3.0], [4.0]])
    y = [0, 0, 1, 1, 1]
    model = train_dt(X, y, {"max_depth": 1})
    tree = model.trees[0]

    np.testing.assert_array_equal(predict_proba(model, X), tree.leaf_value[tree.apply(X)])


def test_feature_importance_single_split() -> None:
    X = np.array([[5.0, 0.0], [5.0, 1.0], [5.0, 2.0], [5.0, 3.0]])
    model = train_dt(X, [0, 0, 1, 1], {"max_depth": 1})

    assert feature_importance(model) == {"f0": 0.0, "f1": 1.0}
    assert top_features(model, 5) == [("f1", 1.0)]


def test_importance_sums_to_one(trained_model) -> None:
    importance = feature_importance(trained_model)

    assert sum(importance.values()) == pytest.approx(1.0)
    assert all(value >= 0 for value in importance.values())


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["dt", "rf", "gbt"])
def test_saved_model_predicts_identically(tmp_path, kind, synthetic_samples, schema) -> None:
    X = [s.feature_vector for s in synthetic_samples]
    y = [s.label for s in synthetic_samples]
    model = train_model(kind, X, y, {"n_estimators": 5} if kind != "dt" else None, seed=2, schema=schema)
    path = tmp_path / f"{kind}.json"

    save_model(model, path)
    restored = load_model(path, expected_schema=schema)

    np.testing.assert_array_equal(predict_proba(restored, X), predict_proba(model, X))
    assert model_to_json(restored) == model_to_json(model)


def test_model_file_errors(tmp_path, trained_model, schema) -> None:
    document = model_to_dict(trained_model)

    with pytest.raises(VersionMismatch):
        model_from_json(json.dumps({**document, "format_version": 2}))
    with pytest.raises(SchemaHashMismatch):
        model_from_json(json.dumps({**document, "feature_names": document["feature_names"][::-1]}))
    with pytest.raises(MalformedModelFile):
        model_from_json("{not json")
    with pytest.raises(MalformedModelFile):
        model_from_json(json.dumps({k: v for k, v in document.items() if k != "trees"}))
    with pytest.raises(ModelFileError):
        load_model(tmp_path / "absent.json")
    with pytest.raises(SchemaMismatch):
        model_from_json(json.dumps(document), expected_schema=adhoc_schema(3))
