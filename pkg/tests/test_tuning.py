from __future__ import annotations

import json

import numpy as np
import pytest

from service.tuning_service import (
    Categorical,
    CVConfig,
    FloatRange,
    IntRange,
    InvalidSearchSpace,
    LengthMismatch,
    SearchSpace,
    TooFewPositives,
    TuningError,
    check_space_for,
    compute_metrics,
    cross_validate,
    default_space,
    optimize_hyperparams,
    run_search,
    space_from_document,
    stratified_folds,
)


def _separable(n: int = 50, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    X = rng.normal(size=(n, 2))
    X[:, 0] += 10.0 * y
    return X, y


class _AlwaysBenign:
    def predict_labels(self, X):
        return np.zeros(len(X), dtype=int)


def _always_benign(X, y, seed):
    return _AlwaysBenign()


# ---------------------------------------------------------------------------
# Folds
# ---------------------------------------------------------------------------

def test_folds_preserve_class_ratio() -> None:
    labels = np.array([1] * 10 + [0] * 90)

    folds = stratified_folds(labels, 5, seed=0)

    assert [int(labels[f].sum()) for f in folds] == [2] * 5
    assert [len(f) for f in folds] == [20] * 5


def test_folds_partition_every_index_once() -> None:
    labels = np.array([1] * 9 + [0] * 91)

    folds = stratified_folds(labels, 5, seed=3)
    joined = np.concatenate(folds)

    assert sorted(joined.tolist()) == list(range(100))
    assert {int(labels[f].sum()) for f in folds} <= {1, 2}
    assert max(len(f) for f in folds) - min(len(f) for f in folds) <= 1


def test_folds_are_seeded() -> None:
    labels = np.array([1] * 10 + [0] * 40)

    first = stratified_folds(labels, 5, seed=7)
    second = stratified_folds(labels, 5, seed=7)

    for a, b in zip(first, second):
        np.testing.assert_array_equal(a, b)


def test_folds_need_k_members_per_class() -> None:
    with pytest.raises(TooFewPositives):
        stratified_folds([1] * 4 + [0] * 96, 5, seed=0)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def test_metrics_worked_example() -> None:
    y_true = [1, 1, 1, 1, 0] + [0] * 95
    y_pred = [1, 1, 1, 0, 1] + [0] * 95

    scores = compute_metrics(y_true, y_pred)

    assert scores.precision == pytest.approx(0.75)
    assert scores.recall == pytest.approx(0.75)
    assert scores.f1 == pytest.approx(0.75)
    assert scores.accuracy == pytest.approx(0.98)


def test_metrics_zero_denominators_and_perfect() -> None:
    assert tuple(compute_metrics([0, 0], [0, 0])) == (0.0, 0.0, 0.0, 1.0)
    assert tuple(compute_metrics([1, 0], [1, 0])) == (1.0, 1.0, 1.0, 1.0)
    with pytest.raises(LengthMismatch):
        compute_metrics([1, 0], [1])


def test_metrics_match_counting_oracle() -> None:
    rng = np.random.default_rng(5)
    for _ in range(30):
        y_true = rng.integers(0, 2, size=40)
        y_pred = rng.integers(0, 2, size=40)
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == 1 and p == 1)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t == 0 and p == 1)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == 1 and p == 0)

        scores = compute_metrics(y_true, y_pred)

        assert scores.precision == pytest.approx(tp / (tp + fp) if tp + fp else 0.0)
        assert scores.recall == pytest.approx(tp / (tp + fn) if tp + fn else 0.0)
        assert scores.accuracy == pytest.approx(float((y_true == y_pred).mean()))


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

def test_constant_learner_scores_majority_accuracy() -> None:
    X = np.zeros((100, 1))
    y = np.array([1] * 10 + [0] * 90)

    report = cross_validate((X, y), _always_benign, cv=CVConfig(k=5, repeats=2, seed=0))

    assert len(report.fold_scores) == 10
    assert report.accuracy.mean == pytest.approx(0.9)
    assert report.accuracy.std == pytest.approx(0.0, abs=1e-12)
    assert report.precision.mean == 0.0
    assert report.recall.mean == 0.0


def test_separable_data_is_learned_perfectly() -> None:
    X, y = _separable()

    report = cross_validate((X, y), "dt", cv=CVConfig(k=5, repeats=2, seed=1))

    assert report.precision.mean == pytest.approx(1.0)
    assert report.recall.mean == pytest.approx(1.0)
    assert report.precision.std == pytest.approx(0.0)
    assert report.as_dict()["folds"] == 10


def test_first_repeat_is_independent_of_repeat_count() -> None:
    X, y = _separable(n=60, seed=4)
    X[:, 0] = np.random.default_rng(4).normal(size=60)

    one = cross_validate((X, y), "dt", {"max_depth": 2}, CVConfig(k=5, repeats=1, seed=3))
    two = cross_validate((X, y), "dt", {"max_depth": 2}, CVConfig(k=5, repeats=2, seed=3))

    assert two.fold_scores[:5] == one.fold_scores


def test_cv_config_is_validated() -> None:
    X, y = _separable()

    with pytest.raises(TuningError):
        cross_validate((X, y), "dt", cv=CVConfig(k=1))
    with pytest.raises(TuningError):
        cross_validate((X, y), "dt", cv=CVConfig(repeats=0))


# ---------------------------------------------------------------------------
# Search spaces
# ---------------------------------------------------------------------------

def test_space_from_document() -> None:
    space = space_from_document({
        "max_depth": {"type": "int", "low": 1, "high": 6},
        "learning_rate": {"type": "float", "low": 0.01, "high": 1.0, "log": True},
        "max_features": {"type": "categorical", "choices": [None, "sqrt"]},
        "n_estimators": 20,
    })

    assert space.names == ["max_depth", "learning_rate", "max_features"]
    assert space.fixed == {"n_estimators": 20}
    assert space.full({"max_depth": 2})["n_estimators"] == 20


@pytest.mark.parametrize(
    "document",
    [
        {"max_depth": {"type": "int", "low": 5, "high": 1}},
        {"max_depth": {"type": "poly", "low": 1, "high": 2}},
        {"learning_rate": {"type": "float", "low": 0.0, "high": 1.0, "log": True}},
        {"criterion": {"type": "categorical", "choices": []}},
        {"max_depth": {"type": "int", "low": 1}},
        {},
    ],
)
def test_invalid_space_documents(document) -> None:
    with pytest.raises(InvalidSearchSpace):
        space_from_document(document)


def test_samples_stay_inside_space() -> None:
    space = default_space("gbt")
    rng = np.random.default_rng(0)

    assert all(space.contains(space.sample(rng)) for _ in range(100))


def test_check_space_rejects_invalid_learner_ranges() -> None:
    check_space_for("dt", default_space("dt"))

    with pytest.raises(InvalidSearchSpace):
        check_space_for("dt", SearchSpace((IntRange("max_depth", 0, 5),)))


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("strategy", ["smbo", "random"])
def test_single_trial_budget(strategy) -> None:
    space = SearchSpace((FloatRange("x", 0.0, 1.0),))

    result = run_search(lambda hp: hp["x"], space, budget=1, strategy=strategy)

    assert len(result.trials) == 1
    assert result.best is result.trials[0]


def test_ties_go_to_first_trial() -> None:
    space = SearchSpace((IntRange("x", 0, 10),))

    result = run_search(lambda hp: 0.5, space, budget=6, strategy="smbo", seed=2)

    assert result.best.index == 0


def test_recall_breaks_objective_ties() -> None:
    space = SearchSpace((Categorical("c", ("a", "b")),))
    outcomes = iter([(0.5, 0.1), (0.5, 0.9), (0.5, 0.9)])

    result = run_search(lambda hp: next(outcomes), space, budget=3, strategy="random")

    assert result.best.index == 1


def test_search_arguments_are_validated() -> None:
    space = SearchSpace((FloatRange("x", 0.0, 1.0),))

    with pytest.raises(TuningError):
        run_search(lambda hp: 0.0, space, budget=0)
    with pytest.raises(TuningError):
        run_search(lambda hp: 0.0, space, budget=3, strategy="grid")


def test_smbo_best_is_maximum_of_trials() -> None:
    space = SearchSpace((IntRange("x", 0, 10), FloatRange("y", 0.0, 1.0)))

    def objective(hp):
        return -((hp["x"] - 7) ** 2) - (hp["y"] - 0.3) ** 2

    result = run_search(objective, space, budget=12, strategy="smbo", seed=4,
                        n_candidates=64, surrogate_trees=10)

    assert result.best.objective == max(t.objective for t in result.trials)
    assert all(space.contains(t.hp) for t in result.trials)


def test_smbo_usually_beats_random_on_a_smooth_peak() -> None:
    space = SearchSpace((FloatRange("x", 0.0, 1.0),))

    def objective(hp):
        return float(np.exp(-(((hp["x"] - 0.72) / 0.05) ** 2)))

    wins = 0
    for seed in range(10):
        smbo = run_search(objective, space, budget=20, strategy="smbo", seed=seed,
                          n_candidates=128, surrogate_trees=15)
        random = run_search(objective, space, budget=20, strategy="random", seed=seed)
        wins += smbo.best.objective >= random.best.objective

    assert wins >= 7


def test_optimize_hyperparams_writes_trial_log(tmp_path) -> None:
    X, y = _separable()
    space = SearchSpace((IntRange("max_depth", 1, 4),), {"min_samples_leaf": 1})
    log_path = tmp_path / "trials.jsonl"

    params, report, records = optimize_hyperparams(
        (X, y), "dt", space, budget=4, strategy="random", cv=CVConfig(k=5, repeats=1, seed=0),
        trial_log_path=log_path,
    )

    assert len(records) == 4
    assert report.precision.mean == max(r["mean_precision"] for r in records)
    assert 1 <= params.max_depth <= 4
    lines = [json.loads(line) for line in log_path.read_text(encoding="utf-8").splitlines()]
    assert [line["trial_index"] for line in lines] == [0, 1, 2, 3]
    assert set(lines[0]) == {"trial_index", "hp", "mean_precision", "mean_recall"}
    assert all(space.contains(line["hp"]) for line in lines)
