"""Item groups and time periods for robust training.

Warm items are clustered into K feature-space groups with k-means; train
interactions are split into E equal-count chronological periods; later periods
get exponentially larger weights.
"""

from dataclasses import dataclass

import numpy as np

from .data import SplitDataset
from .seeding import named_rng


@dataclass
class GroupPeriodIndex:
    """Group/period assignments for one split.

    ``item_group[i]`` is the cluster of warm item ``i`` (-1 for non-warm
    items); ``interaction_period[j]`` is the period of interaction ``j`` of
    the sorted dataset (-1 outside train). ``beta[e]`` is the weight of
    period ``e``.
    """

    item_group: np.ndarray
    interaction_period: np.ndarray
    num_groups: int
    num_periods: int
    beta: np.ndarray

    def __post_init__(self):
        for arr in (self.item_group, self.interaction_period, self.beta):
            arr.setflags(write=False)


def _kmeans_pp_init(points, k, rng):
    """k-means++ seeding: first centroid uniform, then D^2 sampling."""
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = points[first]
    closest_sq = np.sum((points - centroids[0]) ** 2, axis=1)
    for c in range(1, k):
        total = closest_sq.sum()
        if total <= 0.0:
            # all points coincide with chosen centroids; any point works
            idx = int(rng.integers(n))
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(closest_sq), r, side="right"))
            idx = min(idx, n - 1)
        centroids[c] = points[idx]
        closest_sq = np.minimum(closest_sq,
                                np.sum((points - centroids[c]) ** 2, axis=1))
    return centroids


def kmeans_cluster(points: np.ndarray, k: int, seed: int = 0,
                   max_iters: int = 100, tol: float = 1e-6):
    """Lloyd's algorithm with seeded k-means++ initialisation.

    Returns ``(labels, centroids, inertia)``. Empty clusters are re-seeded
    from the point farthest from its assigned centroid, which keeps inertia
    non-increasing across iterations. Ties in assignment go to the lowest
    centroid index; the result is deterministic for a given seed.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be a 2-D array")
    n = points.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points ({n})")
    if not np.all(np.isfinite(points)):
        raise ValueError("non-finite feature values")

    rng = named_rng(seed, "kmeans")
    centroids = _kmeans_pp_init(points, k, rng)

    labels = np.zeros(n, dtype=np.int64)
    prev_inertia = np.inf
    for _ in range(max_iters):
        sq_dist = (np.sum(points ** 2, axis=1)[:, None]
                   - 2.0 * points @ centroids.T
                   + np.sum(centroids ** 2, axis=1)[None, :])
        labels = np.argmin(sq_dist, axis=1)
        point_dist = np.take_along_axis(sq_dist, labels[:, None], axis=1)[:, 0]

        # re-seed empty clusters from the farthest points, farthest first;
        # moving a point can empty a singleton cluster, so repeat until stable
        for _ in range(k):
            counts = np.bincount(labels, minlength=k)
            empty = np.flatnonzero(counts == 0)
            if len(empty) == 0:
                break
            order = np.argsort(-point_dist, kind="stable")
            for c, far in zip(empty, order[:len(empty)]):
                far = int(far)
                centroids[c] = points[far]
                labels[far] = c
                point_dist[far] = 0.0

        inertia = float(np.sum(point_dist))
        assert inertia <= prev_inertia + 1e-9, "inertia increased"
        prev_inertia = inertia

        new_centroids = centroids.copy()
        for c in range(k):
            members = points[labels == c]
            if len(members):
                new_centroids[c] = members.mean(axis=0)
        shift = float(np.sqrt(np.sum((new_centroids - centroids) ** 2)))
        centroids = new_centroids
        if shift < tol:
            break

    # final assignment consistent with the returned centroids
    sq_dist = (np.sum(points ** 2, axis=1)[:, None]
               - 2.0 * points @ centroids.T
               + np.sum(centroids ** 2, axis=1)[None, :])
    labels = np.argmin(sq_dist, axis=1)
    inertia = float(np.sum(np.take_along_axis(sq_dist, labels[:, None], axis=1)))
    return labels, centroids, inertia


def split_periods(num_interactions: int, num_periods: int) -> np.ndarray:
    """Period index for each of ``num_interactions`` chronologically sorted
    interactions: equal-count contiguous chunks, remainder to the earliest
    periods, period index increasing with time."""
    if num_periods < 1:
        raise ValueError(f"number of periods must be >= 1, got {num_periods}")
    if num_periods > num_interactions:
        raise ValueError(
            f"number of periods ({num_periods}) exceeds the number of "
            f"train interactions ({num_interactions})")
    base = num_interactions // num_periods
    remainder = num_interactions % num_periods
    sizes = [base + (1 if e < remainder else 0) for e in range(num_periods)]
    return np.repeat(np.arange(num_periods), sizes)


def period_weights(num_periods: int, p: float, normalize: bool = False) -> np.ndarray:
    """Weight exp(p * e) for periods e = 1..E, as a length-E vector.

    p = 0 weights all periods equally; larger p emphasises later periods.
    ``normalize`` divides by the sum (off by default).
    """
    if num_periods < 1:
        raise ValueError(f"number of periods must be >= 1, got {num_periods}")
    if p < 0:
        raise ValueError(f"steepness p must be non-negative, got {p}")
    beta = np.exp(p * np.arange(1, num_periods + 1, dtype=np.float64))
    if normalize:
        beta = beta / beta.sum()
    return beta


def build_group_period_index(split: SplitDataset, num_groups: int,
                             num_periods: int, p: float, seed: int = 0,
                             *, normalize_beta: bool = False,
                             max_iters: int = 100, tol: float = 1e-6) -> GroupPeriodIndex:
    """Cluster warm items and assign train interactions to periods."""
    warm = split.warm_items
    if num_groups > len(warm):
        raise ValueError(
            f"number of groups ({num_groups}) exceeds the number of "
            f"warm items ({len(warm)})")
    labels, _, _ = kmeans_cluster(split.data.features[warm], num_groups,
                                  seed=seed, max_iters=max_iters, tol=tol)
    item_group = np.full(split.data.num_items, -1, dtype=np.int64)
    item_group[warm] = labels

    periods = split_periods(len(split.train_idx), num_periods)
    interaction_period = np.full(len(split.data), -1, dtype=np.int64)
    interaction_period[split.train_idx] = periods

    return GroupPeriodIndex(
        item_group=item_group,
        interaction_period=interaction_period,
        num_groups=num_groups,
        num_periods=num_periods,
        beta=period_weights(num_periods, p, normalize=normalize_beta),
    )


def write_item_groups(path, index: GroupPeriodIndex):
    """Export ``item_id<TAB>group`` rows for warm items."""
    with open(path, "w", encoding="utf-8") as fh:
        for item_id, group in enumerate(index.item_group):
            if group >= 0:
                fh.write(f"{item_id}\t{int(group)}\n")
