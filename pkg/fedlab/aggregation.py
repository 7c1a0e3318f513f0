"""
Server-side aggregation rules over flat model updates: the unweighted FedAvg
mean and the coordinate-wise Median and Multi-Krum robust baselines.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from fedlab.errors import InvalidInputError, ShapeError
from fedlab.nn.base import FlatParams

logger = logging.getLogger(__name__)

__all__ = ["KrumParams", "fedavg", "median_agg", "krum_scores", "multi_krum"]


def _stack(updates: Sequence) -> Tuple[np.ndarray, tuple]:
    """(n, d) matrix of update vectors and the layout to hand back"""
    updates = list(updates)
    if not updates:
        raise InvalidInputError("no updates to aggregate")
    vectors = [u.values if isinstance(u, FlatParams) else np.ravel(u) for u in updates]
    lengths = {v.size for v in vectors}
    if len(lengths) != 1:
        raise ShapeError("updates differ in length: {}".format(sorted(lengths)))
    first = updates[0]
    if isinstance(first, FlatParams):
        layout = first.layout
    else:
        layout = (("values", (vectors[0].size,)),)
    return np.stack(vectors).astype(np.float64, copy=False), layout


def fedavg(updates: Sequence[FlatParams]) -> FlatParams:
    """Element-wise arithmetic mean of the updates, unweighted

    Example
    -------
    >>> fedavg([[1.0, 3.0], [3.0, 5.0]]).values
    array([2., 4.])
    """
    matrix, layout = _stack(updates)
    return FlatParams(matrix.mean(axis=0), layout)


def median_agg(updates: Sequence[FlatParams]) -> FlatParams:
    """Coordinate-wise median; even counts take the mean of the middle pair"""
    matrix, layout = _stack(updates)
    return FlatParams(np.median(matrix, axis=0), layout)


@dataclass(frozen=True)
class KrumParams:
    """Multi-Krum selection parameters

    Parameters
    ----------
    f : int
        number of byzantine updates assumed present

    m : int
        number of lowest-scoring updates averaged

    """

    f: int
    m: int

    def __post_init__(self):
        if type(self.f) is not int or type(self.m) is not int:
            raise TypeError
        if self.f < 0:
            raise InvalidInputError("f must be non-negative")
        if self.m < 1:
            raise InvalidInputError("m must be positive")

    def check(self, n: int) -> None:
        if n < self.f + 3:
            raise InvalidInputError(
                "multi-krum needs n >= f + 3, got n={} f={}".format(n, self.f)
            )
        if self.m > n:
            raise InvalidInputError("cannot select m={} of {} updates".format(self.m, n))


def krum_scores(matrix: np.ndarray, f: int) -> np.ndarray:
    """Sum of squared distances from each row to its n - f - 2 nearest other rows"""
    n = matrix.shape[0]
    distances = cdist(matrix, matrix, metric="sqeuclidean")
    # column 0 after sorting is the zero self-distance
    nearest = np.sort(distances, axis=1)[:, 1 : n - f - 1]
    return nearest.sum(axis=1)


def multi_krum(
    updates: Sequence[FlatParams], params: KrumParams
) -> Tuple[List[int], FlatParams]:
    """Average of the `m` updates with the lowest Krum scores

    Returns
    -------
    selected : list of int
        positions into `updates`, ascending by score, ties by position

    aggregate : FlatParams

    """
    matrix, layout = _stack(updates)
    n = matrix.shape[0]
    params.check(n)
    scores = krum_scores(matrix, params.f)
    order = np.lexsort((np.arange(n), scores))
    selected = [int(i) for i in order[: params.m]]
    logger.debug("multi-krum scores %s, selected %s", scores.tolist(), selected)
    return selected, FlatParams(matrix[selected].mean(axis=0), layout)
