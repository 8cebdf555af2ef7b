"""
Tree structure and growers
==========================
Flat-array binary trees plus the two greedy growers used by every learner:
CART (classification impurity or squared error) and the second-order
gradient/hessian grower used by boosting.

Split search is vectorized per node: feature columns are presorted once and
each node gathers its samples in sorted order for all candidate features at
once. Candidate thresholds are midpoints of consecutive distinct values and
samples with ``value <= threshold`` go left. Scanning candidates in
(feature ascending, threshold ascending) order and taking the first optimum
breaks ties by lowest feature index, then lowest threshold.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from models.params import Criterion

logger = logging.getLogger(__name__)

LEAF = -1
SQUARED_ERROR = "squared_error"


@dataclass(frozen=True, eq=False)
class Tree:
    feature_index: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_value: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature_index.shape[0])

    def is_leaf(self, node: int) -> bool:
        return int(self.feature_index[node]) == LEAF

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Index of the leaf reached by every row of X."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            features = self.feature_index[node]
            active = np.nonzero(features != LEAF)[0]
            if active.size == 0:
                return node
            current = node[active]
            go_left = X[active, features[active]] <= self.threshold[current]
            node[active] = np.where(go_left, self.left[current], self.right[current])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.leaf_value[self.apply(X)]

    @classmethod
    def leaf(cls, value: float) -> "Tree":
        return cls(
            feature_index=np.array([LEAF], dtype=np.int64),
            threshold=np.array([0.0]),
            left=np.array([LEAF], dtype=np.int64),
            right=np.array([LEAF], dtype=np.int64),
            leaf_value=np.array([float(value)]),
            gain=np.array([0.0]),
        )


def presort(X: np.ndarray) -> np.ndarray:
    """Row indices sorted by each feature, shape (n_features, n_samples)."""
    return np.argsort(X, axis=0, kind="stable").T


def resolve_max_features(max_features, n_features: int) -> int:
    if max_features is None:
        return n_features
    if max_features == "sqrt":
        return max(1, int(math.sqrt(n_features)))
    if max_features == "log2":
        return max(1, int(math.log2(n_features))) if n_features > 1 else 1
    if isinstance(max_features, float):
        return max(1, min(n_features, int(max_features * n_features)))
    return max(1, min(n_features, int(max_features)))


def node_impurity(positive, total, criterion: str) -> np.ndarray:
    """Binary impurity from (weighted) positive and total counts."""
    positive = np.asarray(positive, dtype=float)
    total = np.asarray(total, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(total > 0, positive / total, 0.0)
    q = 1.0 - p
    if criterion == Criterion.GINI.value:
        return 1.0 - p * p - q * q
    log = np.log2 if criterion == Criterion.ENTROPY.value else np.log
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * log(np.where(p > 0, p, 1.0)), 0.0)
        terms += np.where(q > 0, q * log(np.where(q > 0, q, 1.0)), 0.0)
    return -terms


@dataclass
class _Split:
    feature: int
    threshold: float
    gain: float


class _Grower:
    """Recursive preorder grower; subclasses supply node values and split search."""

    def __init__(self, X: np.ndarray, order: np.ndarray, max_depth: int):
        self.X = X
        self.order = order
        self.max_depth = max_depth
        self._feature: list[int] = []
        self._threshold: list[float] = []
        self._left: list[int] = []
        self._right: list[int] = []
        self._value: list[float] = []
        self._gain: list[float] = []

    # -- subclass hooks ----------------------------------------------------
    def node_value(self, mask: np.ndarray) -> float:
        raise NotImplementedError

    def find_split(self, mask: np.ndarray, depth: int) -> _Split | None:
        raise NotImplementedError

    # -- shared machinery ----------------------------------------------------
    def sorted_node(self, mask: np.ndarray, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(row indices, values) of the node's samples sorted per candidate feature."""
        m = int(mask.sum())
        ordered = self.order[features]
        rows = ordered[mask[ordered]].reshape(len(features), m)
        values = self.X[rows, features[:, None]]
        return rows, values

    @staticmethod
    def midpoint(values: np.ndarray, feature_row: int, position: int) -> float:
        low = float(values[feature_row, position])
        high = float(values[feature_row, position + 1])
        threshold = (low + high) / 2.0
        return threshold if threshold < high else low

    def grow(self, mask: np.ndarray) -> Tree:
        self._node(mask, 0)
        return Tree(
            feature_index=np.asarray(self._feature, dtype=np.int64),
            threshold=np.asarray(self._threshold, dtype=float),
            left=np.asarray(self._left, dtype=np.int64),
            right=np.asarray(self._right, dtype=np.int64),
            leaf_value=np.asarray(self._value, dtype=float),
            gain=np.asarray(self._gain, dtype=float),
        )

    def _node(self, mask: np.ndarray, depth: int) -> int:
        node_id = len(self._feature)
        self._feature.append(LEAF)
        self._threshold.append(0.0)
        self._left.append(LEAF)
        self._right.append(LEAF)
        self._value.append(self.node_value(mask))
        self._gain.append(0.0)

        split = self.find_split(mask, depth) if depth < self.max_depth else None
        if split is None:
            return node_id

        goes_left = self.X[:, split.feature] <= split.threshold
        left = self._node(mask & goes_left, depth + 1)
        right = self._node(mask & ~goes_left, depth + 1)
        self._feature[node_id] = split.feature
        self._threshold[node_id] = split.threshold
        self._left[node_id] = left
        self._right[node_id] = right
        self._gain[node_id] = split.gain
        return node_id


class CartGrower(_Grower):
    """
    CART over sample weights (bootstrap counts or ones).

    For classification the node value is the weighted positive fraction; for
    ``squared_error`` it is the weighted mean target.
    """

    def __init__(
            self,
            X: np.ndarray,
            y: np.ndarray,
            order: np.ndarray,
            weights: np.ndarray,
            criterion: str,
            max_depth: int,
            max_features,
            min_samples_leaf: int,
            min_samples_split: int,
            rng: np.random.Generator,
    ):
        super().__init__(X, order, max_depth)
        self.y = y.astype(float)
        self.w = weights.astype(float)
        self.criterion = criterion
        self.n_candidates = resolve_max_features(max_features, X.shape[1])
        self.min_samples_leaf = min_samples_leaf
        self.min_samples_split = min_samples_split
        self.rng = rng

    def node_value(self, mask):
        w = self.w[mask]
        total = w.sum()
        return float((w * self.y[mask]).sum() / total) if total > 0 else 0.0

    def _candidate_features(self) -> np.ndarray:
        n_features = self.X.shape[1]
        if self.n_candidates >= n_features:
            return np.arange(n_features)
        return np.sort(self.rng.choice(n_features, size=self.n_candidates, replace=False))

    def find_split(self, mask, depth):
        w = self.w[mask]
        y = self.y[mask]
        total = w.sum()
        if mask.sum() < 2 or total < self.min_samples_split:
            return None
        if self.criterion == SQUARED_ERROR:
            if np.ptp(y) == 0:
                return None
        else:
            positive = (w * y).sum()
            if positive <= 0 or positive >= total:
                return None

        features = self._candidate_features()
        rows, values = self.sorted_node(mask, features)
        wv = self.w[rows]
        yv = self.y[rows]
        w_left = np.cumsum(wv, axis=1)[:, :-1]
        w_right = total - w_left

        if self.criterion == SQUARED_ERROR:
            s_left = np.cumsum(wv * yv, axis=1)[:, :-1]
            q_left = np.cumsum(wv * yv * yv, axis=1)[:, :-1]
            s_total = (w * y).sum()
            q_total = (w * y * y).sum()
            with np.errstate(divide="ignore", invalid="ignore"):
                score = (q_left - s_left ** 2 / w_left) + ((q_total - q_left) - (s_total - s_left) ** 2 / w_right)
            parent = q_total - s_total ** 2 / total
        else:
            p_left = np.cumsum(wv * yv, axis=1)[:, :-1]
            score = (
                w_left * node_impurity(p_left, w_left, self.criterion)
                + w_right * node_impurity(positive - p_left, w_right, self.criterion)
            )
            parent = total * float(node_impurity(positive, total, self.criterion))

        valid = (
            (values[:, 1:] > values[:, :-1])
            & (w_left >= self.min_samples_leaf)
            & (w_right >= self.min_samples_leaf)
            & np.isfinite(score)
        )
        if not valid.any():
            return None
        score = np.where(valid, score, np.inf)
        row, position = np.unravel_index(int(np.argmin(score)), score.shape)
        return _Split(
            feature=int(features[row]),
            threshold=self.midpoint(values, row, position),
            gain=max(0.0, float(parent - score[row, position])),
        )


class BoostingGrower(_Grower):
    """Second-order split search on gradient/hessian sums with L2 and gamma."""

    def __init__(
            self,
            X: np.ndarray,
            order: np.ndarray,
            grad: np.ndarray,
            hess: np.ndarray,
            features: np.ndarray,
            max_depth: int,
            gamma: float,
            min_child_weight: float,
            l2_lambda: float,
    ):
        super().__init__(X, order, max_depth)
        self.grad = grad
        self.hess = hess
        self.features = features
        self.gamma = gamma
        self.min_child_weight = min_child_weight
        self.l2_lambda = l2_lambda

    def _weight(self, g_sum: float, h_sum: float) -> float:
        denominator = h_sum + self.l2_lambda
        return -g_sum / denominator if denominator > 0 else 0.0

    def node_value(self, mask):
        return self._weight(float(self.grad[mask].sum()), float(self.hess[mask].sum()))

    def find_split(self, mask, depth):
        if mask.sum() < 2:
            return None
        g_total = float(self.grad[mask].sum())
        h_total = float(self.hess[mask].sum())
        lam = self.l2_lambda

        rows, values = self.sorted_node(mask, self.features)
        g_left = np.cumsum(self.grad[rows], axis=1)[:, :-1]
        h_left = np.cumsum(self.hess[rows], axis=1)[:, :-1]
        g_right = g_total - g_left
        h_right = h_total - h_left

        with np.errstate(divide="ignore", invalid="ignore"):
            parent = g_total ** 2 / (h_total + lam) if h_total + lam > 0 else 0.0
            gain = 0.5 * (g_left ** 2 / (h_left + lam) + g_right ** 2 / (h_right + lam) - parent) - self.gamma

        valid = (
            (values[:, 1:] > values[:, :-1])
            & (h_left >= self.min_child_weight)
            & (h_right >= self.min_child_weight)
            & np.isfinite(gain)
        )
        if not valid.any():
            return None
        gain = np.where(valid, gain, -np.inf)
        row, position = np.unravel_index(int(np.argmax(gain)), gain.shape)
        best = float(gain[row, position])
        if best <= 0:
            return None
        return _Split(
            feature=int(self.features[row]),
            threshold=self.midpoint(values, row, position),
            gain=best,
        )
