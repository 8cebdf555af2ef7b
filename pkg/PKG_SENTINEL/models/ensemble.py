"""
Trained model
=============
Immutable container for every learner kind plus probability and importance.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from config.settings import DEFAULT_DECISION_THRESHOLD
from models.boosting import boosted_raw_scores, sigmoid
from models.params import Hyperparams, LearnerKind
from models.tree import LEAF, Tree


class Label(str, Enum):
    BENIGN = "benign"
    MALICIOUS = "malicious"

    @property
    def as_int(self) -> int:
        return 1 if self is Label.MALICIOUS else 0

    @classmethod
    def from_value(cls, value) -> "Label":
        if isinstance(value, Label):
            return value
        if isinstance(value, str):
            text = value.strip().lower()
            if text in ("1", cls.MALICIOUS.value):
                return cls.MALICIOUS
            if text in ("0", cls.BENIGN.value):
                return cls.BENIGN
            raise ValueError(f"Unknown label: {value!r}")
        return cls.MALICIOUS if int(value) == 1 else cls.BENIGN


@dataclass(frozen=True, eq=False)
class TreeEnsembleModel:
    kind: LearnerKind
    trees: tuple[Tree, ...]
    hyperparams: Hyperparams
    schema_version: str
    schema_hash: str
    feature_names: tuple[str, ...]
    extension_list: tuple[str, ...] = ()
    decision_threshold: float = DEFAULT_DECISION_THRESHOLD
    base_raw_score: float = 0.0
    degenerate: bool = False
    training_loss: tuple[float, ...] = field(default_factory=tuple)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def raw_scores(self, X: np.ndarray) -> np.ndarray:
        """Boosting margin; only meaningful for gbt models."""
        return boosted_raw_scores(list(self.trees), X, self.base_raw_score, self.hyperparams.learning_rate)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.degenerate:
            return np.full(X.shape[0], float(self.trees[0].leaf_value[0]))
        if self.kind is LearnerKind.GBT:
            return sigmoid(self.raw_scores(X))
        return np.mean([tree.predict(X) for tree in self.trees], axis=0)

    def predict_labels(self, X: np.ndarray) -> np.ndarray:
        """1 for malicious, 0 for benign."""
        return (self.predict_proba(X) > self.decision_threshold).astype(int)


def feature_importance(model: TreeEnsembleModel) -> dict[str, float]:
    """Total split gain per feature, normalized to sum to one."""
    totals = np.zeros(model.n_features)
    if not model.degenerate:
        for tree in model.trees:
            internal = tree.feature_index != LEAF
            np.add.at(totals, tree.feature_index[internal], tree.gain[internal])
    grand_total = totals.sum()
    if grand_total > 0:
        totals = totals / grand_total
    else:
        totals = np.zeros(model.n_features)
    return {name: float(value) for name, value in zip(model.feature_names, totals)}


def top_features(model: TreeEnsembleModel, limit: int) -> list[tuple[str, float]]:
    ranked = sorted(
        ((name, value) for name, value in feature_importance(model).items() if value > 0),
        key=lambda item: (-item[1], item[0]),
    )
    return ranked[:limit]
