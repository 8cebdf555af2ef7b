"""
Business logic - Controlled Experiments
=======================================
Stratified repeated k-fold cross-validation, positive-class metrics and the
precision-maximizing hyperparameter search (random or sequential
model-based with a forest surrogate and expected improvement).
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

from config.settings import CV_DEFAULTS, TUNING_DEFAULTS
from models.forest import grow_forest, tree_predictions
from models.params import InvalidHyperparams, LearnerKind, RandomForestParams, coerce_kind, params_from_mapping
from models.tree import SQUARED_ERROR
from service.dataset_service import Dataset
from service.training_service import labels_to_array, train_model

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Centralized messages
# ---------------------------------------------------------------------------

ERROR_TOO_FEW = "Each class needs at least k={k} members (positives: {positives}, negatives: {negatives})"
ERROR_LENGTHS = "y_true has {true} entries but y_pred has {pred}"
ERROR_CV_CONFIG = "Invalid CV configuration: {detail}"
ERROR_SPACE = "Invalid search space: {detail}"
ERROR_BUDGET = "Search budget must be at least 1 (got {budget})"
ERROR_STRATEGY = "Unknown search strategy {strategy!r} (expected smbo or random)"
MSG_TRIAL = "Trial %d/%d (%s): precision %.4f recall %.4f %s"

STRATEGIES = ("smbo", "random")
SQRT2 = math.sqrt(2.0)


class TuningError(Exception):
    pass


class TooFewPositives(TuningError, ValueError):
    pass


class LengthMismatch(TuningError, ValueError):
    pass


class InvalidSearchSpace(TuningError, ValueError):
    pass


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

class MetricScores(NamedTuple):
    precision: float
    recall: float
    f1: float
    accuracy: float


class MetricSummary(NamedTuple):
    mean: float
    std: float

    def formatted(self, scale: float = 100.0) -> str:
        return f"{self.mean * scale:.1f} ± {self.std * scale:.1f}"


@dataclass(frozen=True)
class MetricsReport:
    precision: MetricSummary
    recall: MetricSummary
    f1: MetricSummary
    accuracy: MetricSummary
    fold_scores: tuple[MetricScores, ...] = ()
    k: int = 0
    repeats: int = 0

    def as_dict(self) -> dict:
        document = {
            metric: {"mean": getattr(self, metric).mean, "std": getattr(self, metric).std}
            for metric in MetricScores._fields
        }
        document["folds"] = len(self.fold_scores)
        document["k"] = self.k
        document["repeats"] = self.repeats
        return document


def compute_metrics(y_true, y_pred) -> MetricScores:
    """Positive class is malicious; empty denominators give 0."""
    y_true = labels_to_array(y_true)
    y_pred = labels_to_array(y_pred)
    if y_true.shape[0] != y_pred.shape[0]:
        raise LengthMismatch(ERROR_LENGTHS.format(true=y_true.shape[0], pred=y_pred.shape[0]))

    tp = int(np.sum((y_true == 1) & (y_pred == 1)))
    fp = int(np.sum((y_true == 0) & (y_pred == 1)))
    fn = int(np.sum((y_true == 1) & (y_pred == 0)))
    tn = int(np.sum((y_true == 0) & (y_pred == 0)))

    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    total = tp + fp + fn + tn
    accuracy = (tp + tn) / total if total else 0.0
    return MetricScores(precision, recall, f1, accuracy)


def summarize(scores: Sequence[MetricScores], k: int = 0, repeats: int = 0) -> MetricsReport:
    """Flat mean and population std over all fold scores."""
    table = np.asarray(scores, dtype=float).reshape(len(scores), len(MetricScores._fields))
    summaries = [
        MetricSummary(float(table[:, i].mean()), float(table[:, i].std())) if len(scores) else MetricSummary(0.0, 0.0)
        for i in range(len(MetricScores._fields))
    ]
    return MetricsReport(*summaries, fold_scores=tuple(scores), k=k, repeats=repeats)


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CVConfig:
    k: int = CV_DEFAULTS["k"]
    repeats: int = CV_DEFAULTS["repeats"]
    seed: int = CV_DEFAULTS["seed"]
    n_jobs: int = 1

    def validate(self) -> "CVConfig":
        if isinstance(self.k, bool) or not isinstance(self.k, int) or self.k < 2:
            raise TuningError(ERROR_CV_CONFIG.format(detail=f"k must be an integer >= 2 (got {self.k})"))
        if isinstance(self.repeats, bool) or not isinstance(self.repeats, int) or self.repeats < 1:
            raise TuningError(ERROR_CV_CONFIG.format(detail=f"repeats must be >= 1 (got {self.repeats})"))
        if self.n_jobs < 1:
            raise TuningError(ERROR_CV_CONFIG.format(detail="n_jobs must be >= 1"))
        return self


def stratified_folds(labels, k: int, seed: int) -> list[np.ndarray]:
    """
    Partition indices into k folds preserving the class ratio.

    Both classes are shuffled and dealt round-robin; negatives start where
    the positives stopped so fold sizes also differ by at most one.
    """
    labels = labels_to_array(labels)
    positives = np.flatnonzero(labels == 1)
    negatives = np.flatnonzero(labels == 0)
    if positives.size < k or negatives.size < k:
        raise TooFewPositives(ERROR_TOO_FEW.format(k=k, positives=positives.size, negatives=negatives.size))

    rng = np.random.default_rng(seed)
    positives = rng.permutation(positives)
    negatives = rng.permutation(negatives)

    folds: list[list[int]] = [[] for _ in range(k)]
    for i, index in enumerate(positives):
        folds[i % k].append(int(index))
    offset = positives.size % k
    for i, index in enumerate(negatives):
        folds[(offset + i) % k].append(int(index))
    return [np.sort(np.asarray(fold, dtype=np.int64)) for fold in folds]


def _training_seed(seed: int, repeat: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, repeat, fold]).generate_state(1)[0])


def _unpack(data) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    if isinstance(data, Dataset):
        return data.matrix(), data.labels(), data.ecosystems()
    X, y, *rest = data
    ecosystems = np.asarray(rest[0]) if rest and rest[0] is not None else None
    return np.asarray(X, dtype=float), labels_to_array(y), ecosystems


def cross_validate(
        data,
        learner,
        hp=None,
        cv: CVConfig | None = None,
        eval_ecosystem: str | None = None,
) -> MetricsReport:
    """
    Repeated stratified k-fold evaluation.

    Args:
        data: a Dataset, or (X, y) / (X, y, ecosystems).
        learner: a learner kind, or a callable ``(X, y, seed) -> model`` whose
            result has ``predict_labels(X)``.
        eval_ecosystem: score only the held-out rows of this ecosystem.
    """
    cv = (cv or CVConfig()).validate()
    X, y, ecosystems = _unpack(data)
    if callable(learner):
        fit = learner
    else:
        kind = coerce_kind(learner)

        def fit(X_train, y_train, seed):
            return train_model(kind, X_train, y_train, hp, seed)

    def evaluate(repeat: int, fold_index: int, test: np.ndarray) -> MetricScores:
        train_mask = np.ones(y.shape[0], dtype=bool)
        train_mask[test] = False
        model = fit(X[train_mask], y[train_mask], _training_seed(cv.seed, repeat, fold_index))
        if eval_ecosystem is not None and ecosystems is not None:
            test = test[ecosystems[test] == eval_ecosystem]
        predictions = model.predict_labels(X[test]) if test.size else np.zeros(0, dtype=int)
        return compute_metrics(y[test], predictions)

    scores: list[MetricScores] = []
    for repeat in range(1, cv.repeats + 1):
        folds = stratified_folds(y, cv.k, cv.seed + repeat)
        if cv.n_jobs > 1:
            with ThreadPoolExecutor(max_workers=cv.n_jobs) as pool:
                scores.extend(pool.map(lambda item: evaluate(repeat, *item), enumerate(folds)))
        else:
            scores.extend(evaluate(repeat, i, fold) for i, fold in enumerate(folds))
    return summarize(scores, cv.k, cv.repeats)


# ---------------------------------------------------------------------------
# Search spaces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntRange:
    name: str
    low: int
    high: int
    log: bool = False

    def sample(self, rng: np.random.Generator) -> int:
        if self.log:
            value = math.exp(rng.uniform(math.log(self.low), math.log(self.high)))
            return int(min(self.high, max(self.low, round(value))))
        return int(rng.integers(self.low, self.high + 1))

    def encode(self, value) -> float:
        return _unit(float(value), self.low, self.high, self.log)

    def contains(self, value) -> bool:
        return isinstance(value, int) and not isinstance(value, bool) and self.low <= value <= self.high


@dataclass(frozen=True)
class FloatRange:
    name: str
    low: float
    high: float
    log: bool = False

    def sample(self, rng: np.random.Generator) -> float:
        if self.log:
            value = math.exp(rng.uniform(math.log(self.low), math.log(self.high)))
            return float(min(self.high, max(self.low, value)))
        return float(rng.uniform(self.low, self.high))

    def encode(self, value) -> float:
        return _unit(float(value), self.low, self.high, self.log)

    def contains(self, value) -> bool:
        return isinstance(value, (int, float)) and not isinstance(value, bool) and self.low <= value <= self.high


@dataclass(frozen=True)
class Categorical:
    name: str
    choices: tuple

    def sample(self, rng: np.random.Generator):
        return self.choices[int(rng.integers(len(self.choices)))]

    def encode(self, value) -> float:
        if len(self.choices) == 1:
            return 0.0
        return self.choices.index(value) / (len(self.choices) - 1)

    def contains(self, value) -> bool:
        return value in self.choices


Dimension = IntRange | FloatRange | Categorical


def _unit(value: float, low: float, high: float, log: bool) -> float:
    if high == low:
        return 0.0
    if log:
        return (math.log(value) - math.log(low)) / (math.log(high) - math.log(low))
    return (value - low) / (high - low)


@dataclass(frozen=True)
class SearchSpace:
    dimensions: tuple
    fixed: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if not self.dimensions:
            raise InvalidSearchSpace(ERROR_SPACE.format(detail="no dimensions"))
        names = [d.name for d in self.dimensions]
        if len(set(names)) != len(names):
            raise InvalidSearchSpace(ERROR_SPACE.format(detail="duplicate dimension names"))
        for dim in self.dimensions:
            _check_dimension(dim)

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dimensions]

    def sample(self, rng: np.random.Generator) -> dict:
        return {dim.name: dim.sample(rng) for dim in self.dimensions}

    def encode(self, hp: Mapping) -> np.ndarray:
        return np.asarray([dim.encode(hp[dim.name]) for dim in self.dimensions], dtype=float)

    def contains(self, hp: Mapping) -> bool:
        return all(dim.contains(hp.get(dim.name)) for dim in self.dimensions)

    def full(self, hp: Mapping) -> dict:
        return {**dict(self.fixed), **hp}


def _check_dimension(dim) -> None:
    if isinstance(dim, Categorical):
        if not dim.choices:
            raise InvalidSearchSpace(ERROR_SPACE.format(detail=f"{dim.name} has no choices"))
        return
    if not (math.isfinite(dim.low) and math.isfinite(dim.high)) or dim.low > dim.high:
        raise InvalidSearchSpace(ERROR_SPACE.format(detail=f"{dim.name} needs finite bounds with low <= high"))
    if dim.log and dim.low <= 0:
        raise InvalidSearchSpace(ERROR_SPACE.format(detail=f"{dim.name} is log-scaled and needs low > 0"))


DEFAULT_SPACES = {
    LearnerKind.DT: (
        IntRange("max_depth", 1, 32),
        Categorical("max_features", (None, "sqrt", "log2")),
        Categorical("criterion", ("gini", "entropy", "log_loss")),
        IntRange("min_samples_leaf", 1, 20),
        IntRange("min_samples_split", 2, 20),
    ),
    LearnerKind.RF: (
        IntRange("max_depth", 1, 32),
        Categorical("max_features", (None, "sqrt", "log2")),
        Categorical("criterion", ("gini", "entropy", "log_loss")),
        IntRange("min_samples_leaf", 1, 20),
        IntRange("min_samples_split", 2, 20),
        IntRange("n_estimators", 10, 300, log=True),
        FloatRange("max_samples", 0.1, 1.0),
    ),
    LearnerKind.GBT: (
        IntRange("max_depth", 1, 12),
        IntRange("n_estimators", 10, 300, log=True),
        FloatRange("colsample_bytree", 0.3, 1.0),
        FloatRange("learning_rate", 0.01, 1.0, log=True),
        FloatRange("gamma", 0.0, 5.0),
        FloatRange("min_child_weight", 0.0, 10.0),
    ),
}


def default_space(kind) -> SearchSpace:
    return SearchSpace(DEFAULT_SPACES[coerce_kind(kind)])


def space_from_document(document) -> SearchSpace:
    """
    Build a space from a mapping of ``name -> entry``.

    An entry is ``{type: int|float, low, high, log}``, ``{type: categorical,
    choices: [...]}`` or a plain scalar, which fixes that hyperparameter.
    """
    if not isinstance(document, Mapping):
        raise InvalidSearchSpace(ERROR_SPACE.format(detail="expected a mapping"))
    dimensions = []
    fixed = {}
    for name, entry in document.items():
        if not isinstance(entry, Mapping):
            fixed[str(name)] = entry
            continue
        kind = entry.get("type")
        try:
            if kind == "int":
                dimensions.append(IntRange(str(name), int(entry["low"]), int(entry["high"]), bool(entry.get("log", False))))
            elif kind == "float":
                dimensions.append(FloatRange(str(name), float(entry["low"]), float(entry["high"]),
                                             bool(entry.get("log", False))))
            elif kind == "categorical":
                dimensions.append(Categorical(str(name), tuple(entry["choices"])))
            else:
                raise InvalidSearchSpace(ERROR_SPACE.format(detail=f"{name}: unknown type {kind!r}"))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InvalidSearchSpace):
                raise
            raise InvalidSearchSpace(ERROR_SPACE.format(detail=f"{name}: {exc}")) from exc
    return SearchSpace(tuple(dimensions), fixed)


def check_space_for(kind, space: SearchSpace) -> None:
    """Every point of the space must be a valid hyperparameter set for ``kind``."""
    kind = coerce_kind(kind)
    rng = np.random.default_rng(0)
    points = [space.sample(rng) for _ in range(8)]
    for dim in space.dimensions:
        if isinstance(dim, Categorical):
            points.extend({**points[0], dim.name: choice} for choice in dim.choices)
        else:
            points.extend({**points[0], dim.name: bound} for bound in (dim.low, dim.high))
    for hp in points:
        try:
            params_from_mapping(kind, space.full(hp))
        except InvalidHyperparams as exc:
            raise InvalidSearchSpace(ERROR_SPACE.format(detail=str(exc))) from exc


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trial:
    index: int
    hp: dict
    objective: float
    recall: float
    report: MetricsReport | None = None

    def as_record(self) -> dict:
        return {
            "trial_index": self.index,
            "hp": self.hp,
            "mean_precision": self.objective,
            "mean_recall": self.recall,
        }


@dataclass(frozen=True)
class SearchResult:
    best: Trial
    trials: tuple[Trial, ...]


def _normal_cdf(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.array([math.erf(v / SQRT2) for v in z]))


def _normal_pdf(z: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def expected_improvement(mu: np.ndarray, sigma: np.ndarray, best: float) -> np.ndarray:
    improvement = mu - best
    ei = np.maximum(improvement, 0.0)
    spread = sigma > 0
    if spread.any():
        z = improvement[spread] / sigma[spread]
        ei[spread] = improvement[spread] * _normal_cdf(z) + sigma[spread] * _normal_pdf(z)
    return ei


def _propose(space: SearchSpace, trials: list[Trial], rng: np.random.Generator,
             n_candidates: int, n_trees: int) -> dict:
    history = np.vstack([space.encode(t.hp) for t in trials])
    targets = np.asarray([t.objective for t in trials], dtype=float)
    surrogate = RandomForestParams(n_estimators=n_trees, max_features=None, max_depth=32)
    trees = grow_forest(history, targets, surrogate, int(rng.integers(2 ** 31)), criterion=SQUARED_ERROR)

    candidates = [space.sample(rng) for _ in range(n_candidates)]
    encoded = np.vstack([space.encode(c) for c in candidates])
    predictions = tree_predictions(trees, encoded)
    mu = predictions.mean(axis=0)
    sigma = predictions.std(axis=0)
    ei = expected_improvement(mu, sigma, float(targets.max()))
    choice = int(np.argmax(ei)) if ei.max() > 0 else int(np.argmax(mu))
    return candidates[choice]


def _score(result) -> tuple[float, float, MetricsReport | None]:
    if isinstance(result, MetricsReport):
        return result.precision.mean, result.recall.mean, result
    if isinstance(result, tuple):
        objective, recall, *rest = result
        return float(objective), float(recall), rest[0] if rest else None
    return float(result), 0.0, None


def run_search(
        objective: Callable[[dict], object],
        space: SearchSpace,
        budget: int = TUNING_DEFAULTS["budget"],
        strategy: str = TUNING_DEFAULTS["strategy"],
        seed: int = 0,
        n_candidates: int = TUNING_DEFAULTS["candidates"],
        surrogate_trees: int = TUNING_DEFAULTS["surrogate_trees"],
        on_trial: Callable[[Trial], None] | None = None,
) -> SearchResult:
    """
    Maximize ``objective`` over ``space``.

    The objective returns a float, a (value, recall[, report]) tuple or a
    MetricsReport. The best trial has the highest value, then the highest
    recall, then the lowest index.
    """
    if isinstance(budget, bool) or not isinstance(budget, int) or budget < 1:
        raise TuningError(ERROR_BUDGET.format(budget=budget))
    if strategy not in STRATEGIES:
        raise TuningError(ERROR_STRATEGY.format(strategy=strategy))

    rng = np.random.default_rng(seed)
    n_init = budget if strategy == "random" else min(budget, max(5, budget // 4))
    trials: list[Trial] = []
    for index in range(budget):
        if index < n_init:
            hp = space.sample(rng)
        else:
            hp = _propose(space, trials, rng, n_candidates, surrogate_trees)
        value, recall, report = _score(objective(hp))
        trial = Trial(index, hp, value, recall, report)
        trials.append(trial)
        if on_trial is not None:
            on_trial(trial)

    best = max(trials, key=lambda t: (t.objective, t.recall, -t.index))
    return SearchResult(best, tuple(trials))


def write_trial_log(trials: Sequence[Trial], path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for trial in trials:
            handle.write(json.dumps(trial.as_record(), sort_keys=True) + "\n")


def optimize_hyperparams(
        data,
        learner_kind,
        space: SearchSpace | None = None,
        budget: int = TUNING_DEFAULTS["budget"],
        strategy: str = TUNING_DEFAULTS["strategy"],
        cv: CVConfig | None = None,
        seed: int = 0,
        eval_ecosystem: str | None = None,
        trial_log_path=None,
):
    """
    Search hyperparameters for the highest mean CV precision.

    Returns (best hyperparams, best MetricsReport, trial log records).
    """
    kind = coerce_kind(learner_kind)
    space = space or default_space(kind)
    check_space_for(kind, space)
    cv = (cv or CVConfig(repeats=TUNING_DEFAULTS["repeats"], seed=seed)).validate()

    def objective(hp: dict):
        params = params_from_mapping(kind, space.full(hp))
        report = cross_validate(data, kind, params, cv, eval_ecosystem)
        return report.precision.mean, report.recall.mean, report

    def log_trial(trial: Trial):
        logger.info(MSG_TRIAL, trial.index + 1, budget, strategy, trial.objective, trial.recall, trial.hp)

    result = run_search(objective, space, budget, strategy, seed, on_trial=log_trial)
    if trial_log_path is not None:
        write_trial_log(result.trials, trial_log_path)

    best_params = params_from_mapping(kind, space.full(result.best.hp))
    return best_params, result.best.report, [t.as_record() for t in result.trials]
