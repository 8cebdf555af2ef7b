"""
Gradient-boosted trees
======================
Second-order boosting on the logistic loss. Trees store raw leaf weights;
the learning rate is applied at prediction time.
"""

import logging
import math

import numpy as np

from models.params import BoostingParams
from models.tree import BoostingGrower, Tree, presort

logger = logging.getLogger(__name__)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def logistic_loss(y: np.ndarray, raw: np.ndarray) -> float:
    """Mean negative log-likelihood of labels y under raw scores."""
    return float(np.mean(np.logaddexp(0.0, raw) - y * raw))


def column_subset(n_features: int, colsample: float, rng: np.random.Generator) -> np.ndarray:
    k = max(1, int(math.floor(colsample * n_features)))
    if k >= n_features:
        return np.arange(n_features)
    return np.sort(rng.choice(n_features, size=k, replace=False))


def grow_boosted(
        X: np.ndarray,
        y: np.ndarray,
        params: BoostingParams,
        seed: int,
        base_raw_score: float = 0.0,
) -> tuple[list[Tree], list[float]]:
    """
    Run ``params.n_estimators`` boosting rounds.

    Returns the trees and the training loss before the first round followed
    by the loss after every round.
    """
    y = y.astype(float)
    rng = np.random.default_rng(seed)
    order = presort(X)
    raw = np.full(X.shape[0], base_raw_score, dtype=float)
    trees: list[Tree] = []
    losses = [logistic_loss(y, raw)]

    for round_index in range(params.n_estimators):
        p = sigmoid(raw)
        grad = p - y
        hess = p * (1.0 - p)
        grower = BoostingGrower(
            X=X,
            order=order,
            grad=grad,
            hess=hess,
            features=column_subset(X.shape[1], params.colsample_bytree, rng),
            max_depth=params.max_depth,
            gamma=params.gamma,
            min_child_weight=params.min_child_weight,
            l2_lambda=params.l2_lambda,
        )
        tree = grower.grow(np.ones(X.shape[0], dtype=bool))
        trees.append(tree)
        raw = raw + params.learning_rate * tree.predict(X)
        losses.append(logistic_loss(y, raw))
        logger.debug("Round %d: %d nodes, loss %.6f", round_index, tree.n_nodes, losses[-1])

    return trees, losses


def boosted_raw_scores(trees: list[Tree], X: np.ndarray, base_raw_score: float, learning_rate: float) -> np.ndarray:
    raw = np.full(X.shape[0], base_raw_score, dtype=float)
    for tree in trees:
        raw += learning_rate * tree.predict(X)
    return raw
