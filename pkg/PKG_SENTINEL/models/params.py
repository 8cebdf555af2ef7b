"""
Learner hyperparameters
=======================
Typed, validated hyperparameter sets for the three tree learners.
"""

import math
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Mapping

from config.settings import DEFAULT_L2_LAMBDA

ERROR_INVALID_VALUE = "Invalid hyperparameter {name}={value!r}: {reason}"
ERROR_UNKNOWN_KEYS = "Unknown hyperparameters for {kind}: {keys}"
ERROR_UNKNOWN_KIND = "Unknown learner kind: {kind!r}"


class ModelError(Exception):
    """Base class for learner, model and model-file errors."""


class InvalidHyperparams(ModelError, ValueError):
    pass


class LearnerKind(str, Enum):
    DT = "dt"
    RF = "rf"
    GBT = "gbt"


class Criterion(str, Enum):
    GINI = "gini"
    ENTROPY = "entropy"
    LOG_LOSS = "log_loss"


MAX_DEPTH_RANGE = (1, 32)
MAX_ESTIMATORS = 2000
MAX_FEATURES_NAMES = ("sqrt", "log2")


def _fail(name, value, reason):
    raise InvalidHyperparams(ERROR_INVALID_VALUE.format(name=name, value=value, reason=reason))


def _check_int(name, value, low, high=None):
    if isinstance(value, bool) or not isinstance(value, int):
        _fail(name, value, "expected an integer")
    if value < low or (high is not None and value > high):
        _fail(name, value, f"expected a value in [{low}, {high if high is not None else 'inf'}]")


def _check_float(name, value, low, high, low_open=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        _fail(name, value, "expected a finite number")
    if value < low or value > high or (low_open and value == low):
        bracket = "(" if low_open else "["
        _fail(name, value, f"expected a value in {bracket}{low}, {high}]")


def _check_max_features(value):
    if value is None or value in MAX_FEATURES_NAMES:
        return
    if isinstance(value, bool):
        _fail("max_features", value, "expected None, 'sqrt', 'log2', an integer or a fraction")
    if isinstance(value, int):
        _check_int("max_features", value, 1)
        return
    if isinstance(value, float):
        _check_float("max_features", value, 0.0, 1.0, low_open=True)
        return
    _fail("max_features", value, "expected None, 'sqrt', 'log2', an integer or a fraction")


@dataclass(frozen=True)
class DecisionTreeParams:
    max_depth: int = 10
    max_features: object = None
    criterion: str = Criterion.GINI.value
    min_samples_leaf: int = 1
    min_samples_split: int = 2

    def validate(self):
        _check_int("max_depth", self.max_depth, *MAX_DEPTH_RANGE)
        _check_max_features(self.max_features)
        if self.criterion not in {c.value for c in Criterion}:
            _fail("criterion", self.criterion, "expected gini, entropy or log_loss")
        _check_int("min_samples_leaf", self.min_samples_leaf, 1)
        _check_int("min_samples_split", self.min_samples_split, 2)
        return self


@dataclass(frozen=True)
class RandomForestParams(DecisionTreeParams):
    max_features: object = "sqrt"
    n_estimators: int = 100
    max_samples: float = 1.0
    bootstrap: bool = True
    n_jobs: int = 1

    def validate(self):
        super().validate()
        _check_int("n_estimators", self.n_estimators, 1, MAX_ESTIMATORS)
        _check_float("max_samples", self.max_samples, 0.0, 1.0, low_open=True)
        if not isinstance(self.bootstrap, bool):
            _fail("bootstrap", self.bootstrap, "expected a boolean")
        _check_int("n_jobs", self.n_jobs, 1)
        return self


@dataclass(frozen=True)
class BoostingParams:
    max_depth: int = 6
    n_estimators: int = 100
    colsample_bytree: float = 1.0
    learning_rate: float = 0.3
    gamma: float = 0.0
    min_child_weight: float = 1.0
    l2_lambda: float = DEFAULT_L2_LAMBDA

    def validate(self):
        _check_int("max_depth", self.max_depth, *MAX_DEPTH_RANGE)
        _check_int("n_estimators", self.n_estimators, 0, MAX_ESTIMATORS)
        _check_float("colsample_bytree", self.colsample_bytree, 0.0, 1.0, low_open=True)
        _check_float("learning_rate", self.learning_rate, 0.0, 1.0, low_open=True)
        _check_float("gamma", self.gamma, 0.0, math.inf)
        _check_float("min_child_weight", self.min_child_weight, 0.0, math.inf)
        _check_float("l2_lambda", self.l2_lambda, 0.0, math.inf)
        return self


PARAMS_BY_KIND = {
    LearnerKind.DT: DecisionTreeParams,
    LearnerKind.RF: RandomForestParams,
    LearnerKind.GBT: BoostingParams,
}

Hyperparams = DecisionTreeParams | RandomForestParams | BoostingParams


def coerce_kind(kind) -> LearnerKind:
    try:
        return kind if isinstance(kind, LearnerKind) else LearnerKind(str(kind).lower())
    except ValueError as exc:
        raise InvalidHyperparams(ERROR_UNKNOWN_KIND.format(kind=kind)) from exc


def default_params(kind) -> Hyperparams:
    return PARAMS_BY_KIND[coerce_kind(kind)]()


def params_from_mapping(kind, mapping: Mapping | None) -> Hyperparams:
    """Build and validate params; unknown keys are rejected."""
    kind = coerce_kind(kind)
    cls = PARAMS_BY_KIND[kind]
    mapping = dict(mapping or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise InvalidHyperparams(ERROR_UNKNOWN_KEYS.format(kind=kind.value, keys=", ".join(unknown)))

    # YAML/JSON numbers arrive as int or float; keep fractional fields float.
    for f in fields(cls):
        value = mapping.get(f.name)
        if f.type in (float, "float") and isinstance(value, int) and not isinstance(value, bool):
            mapping[f.name] = float(value)
    return cls(**mapping).validate()


def params_to_mapping(params: Hyperparams) -> dict:
    return asdict(params)
