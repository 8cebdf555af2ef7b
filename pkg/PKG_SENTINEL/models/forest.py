"""
Random forest
=============
Bagged CART trees with per-node feature subsampling. The same grower runs in
regression mode (``squared_error``) for the hyperparameter search surrogate.
"""

import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from models.params import DecisionTreeParams, RandomForestParams
from models.tree import CartGrower, Tree, presort

logger = logging.getLogger(__name__)


def grow_tree(
        X: np.ndarray,
        y: np.ndarray,
        params: DecisionTreeParams,
        rng: np.random.Generator,
        weights: np.ndarray | None = None,
        order: np.ndarray | None = None,
        criterion: str | None = None,
) -> Tree:
    """Grow one CART tree on the rows with positive weight."""
    weights = np.ones(X.shape[0]) if weights is None else weights
    grower = CartGrower(
        X=X,
        y=y,
        order=presort(X) if order is None else order,
        weights=weights,
        criterion=criterion or params.criterion,
        max_depth=params.max_depth,
        max_features=params.max_features,
        min_samples_leaf=params.min_samples_leaf,
        min_samples_split=params.min_samples_split,
        rng=rng,
    )
    return grower.grow(weights > 0)


def bootstrap_weights(n_samples: int, max_samples: float, bootstrap: bool, rng: np.random.Generator) -> np.ndarray:
    """Draw counts per row; without bootstrap every row is used once."""
    if not bootstrap:
        return np.ones(n_samples)
    size = max(1, int(round(max_samples * n_samples)))
    draws = rng.integers(0, n_samples, size=size)
    return np.bincount(draws, minlength=n_samples).astype(float)


def grow_forest(
        X: np.ndarray,
        y: np.ndarray,
        params: RandomForestParams,
        seed: int,
        criterion: str | None = None,
) -> list[Tree]:
    order = presort(X)
    children = np.random.SeedSequence(seed).spawn(params.n_estimators)

    def build(child: np.random.SeedSequence) -> Tree:
        rng = np.random.default_rng(child)
        weights = bootstrap_weights(X.shape[0], params.max_samples, params.bootstrap, rng)
        return grow_tree(X, y, params, rng, weights=weights, order=order, criterion=criterion)

    if params.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=params.n_jobs) as pool:
            trees = list(pool.map(build, children))
    else:
        trees = [build(child) for child in children]

    logger.debug("Grew %d trees (%d nodes total)", len(trees), sum(t.n_nodes for t in trees))
    return trees


def tree_predictions(trees: list[Tree], X: np.ndarray) -> np.ndarray:
    """Per-tree leaf values, shape (n_trees, n_samples)."""
    return np.vstack([tree.predict(X) for tree in trees])
