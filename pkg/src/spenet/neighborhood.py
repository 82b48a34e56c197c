"""Ball-query neighborhoods, farthest point sampling and A-RI support points.

Everything here is brute force over dense distance matrices. At the point
counts this package targets (a few thousand) that is fast enough and keeps
tie-breaking exact and easy to reason about.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEGENERATE_NORM = 1e-12
CENTER_TIE_RTOL = 1e-12  # mean distances this close count as a tie


@dataclass(frozen=True)
class NeighborhoodIndex:
    query_indices: np.ndarray  # (M,)
    neighbor_lists: np.ndarray  # (M, K)
    radius: float
    k: int

    def __post_init__(self):
        if self.neighbor_lists.shape != (len(self.query_indices), self.k):
            raise ValueError("neighbor_lists must have shape (M, K)")


@dataclass(frozen=True)
class SupportPoints:
    center_index: np.ndarray  # (M,) point index of m_i
    center: np.ndarray  # (M, 3)
    intersection: np.ndarray  # (M, 3)
    radius: float


def _as_points(points) -> np.ndarray:
    pts = getattr(points, "positions", points)
    return np.asarray(pts, dtype=np.float64)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    at, bt = np.ascontiguousarray(a.T), np.ascontiguousarray(b.T)
    out = np.subtract.outer(at[0], bt[0])
    out *= out
    for c in (1, 2):
        d = np.subtract.outer(at[c], bt[c])
        d *= d
        out += d
    return out


def ball_query_positions(
    points: np.ndarray, queries: np.ndarray, radius: float, k: int
) -> np.ndarray:
    """Neighbor lists (M, K) for query coordinates ``queries`` (M, 3).

    In-radius points come in ascending distance order (index breaks ties).
    Short lists repeat cyclically; an empty ball falls back to the single
    nearest point.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if len(points) == 0:
        raise ValueError("ball query on an empty point set")
    d2 = _sq_dists(queries, points)
    count = (d2 <= radius * radius).sum(axis=1)
    order = _k_smallest(d2, k)
    slot = np.arange(k)[None, :] % np.maximum(np.minimum(count, k), 1)[:, None]
    return np.take_along_axis(order, slot, axis=1)


def _k_smallest(d2: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the ``k`` smallest entries per row, ordered by (value, index).

    Equivalent to the first ``k`` columns of a stable argsort; padded by
    repetition of the last column when a row is shorter than ``k``.
    """
    n = d2.shape[1]
    kk = min(k + 1, n)
    if kk == n:
        order = np.argsort(d2, axis=1, kind="stable")
    else:
        part = np.argpartition(d2, kk - 1, axis=1)[:, :kk]
        vals = np.take_along_axis(d2, part, axis=1)
        within = np.lexsort((part, vals), axis=1)
        order = np.take_along_axis(part, within, axis=1)
        svals = np.take_along_axis(vals, within, axis=1)
        # rows whose k-th value ties with values outside the partition
        bad = svals[:, k - 1] >= svals[:, -1]
        if bad.any():
            full = np.argsort(d2[bad], axis=1, kind="stable")[:, :kk]
            order[bad] = full
    if order.shape[1] < k:
        order = np.concatenate([order, np.repeat(order[:, -1:], k - order.shape[1], axis=1)], axis=1)
    return order[:, :k]


def ball_query(points, queries, radius: float, k: int, seed: int = 0) -> NeighborhoodIndex:
    """Ball query around the points indexed by ``queries``.

    ``seed`` is accepted for interface stability; the query is deterministic.
    """
    pts = _as_points(points)
    if pts.shape[0] == 0:
        raise ValueError("ball query on an empty point set")
    q = np.asarray(queries, dtype=np.int64).reshape(-1)
    nbrs = ball_query_positions(pts, pts[q], radius, k)
    return NeighborhoodIndex(q, nbrs, float(radius), int(k))


def farthest_point_sample(points, m: int) -> np.ndarray:
    """Indices of ``m`` points chosen greedily by max-min distance from index 0."""
    pts = _as_points(points)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} of {n} points")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = 0
    mind = np.full(n, np.inf)
    last = 0
    for i in range(1, m):
        d = pts - pts[last]
        np.minimum(mind, np.einsum("ij,ij->i", d, d), out=mind)
        last = int(np.argmax(mind))  # first maximum -> lowest index
        chosen[i] = last
    return chosen


def center_point(points, neighbor_list) -> int:
    """Neighbor with the smallest mean distance to the other distinct neighbors."""
    nl = np.asarray(neighbor_list, dtype=np.int64).reshape(1, -1)
    return int(center_points(_as_points(points), nl)[0])


def center_points(points: np.ndarray, neighbor_lists: np.ndarray) -> np.ndarray:
    """Vectorized ``center_point`` over an (M, K) array of neighbor lists."""
    nl = np.asarray(neighbor_lists, dtype=np.int64)
    m, k = nl.shape
    # padding repeats are not "other" neighbors
    same = nl[:, :, None] == nl[:, None, :]
    earlier = np.tril(np.ones((k, k), dtype=bool), -1)
    distinct = ~np.any(same & earlier[None], axis=2)  # first occurrence only
    p = points[nl]  # (M, K, 3)
    diff = p[:, :, None, :] - p[:, None, :, :]
    dist = np.sqrt(np.einsum("mijc,mijc->mij", diff, diff))
    weight = distinct[:, None, :].astype(np.float64)
    n_other = distinct.sum(axis=1, keepdims=True) - 1
    mean = (dist * weight).sum(axis=2) / np.maximum(n_other, 1)
    mean = np.where(distinct, mean, np.inf)
    best = mean.min(axis=1, keepdims=True)
    # lowest point index among minima equal up to rounding
    tie = mean <= best + CENTER_TIE_RTOL * np.abs(best)
    cand = np.where(tie, nl, np.iinfo(np.int64).max)
    return cand.min(axis=1)


def support_intersection(query, radius: float) -> np.ndarray:
    """Point where the ray from the origin through ``query`` leaves its ball.

    A query at the origin has no ray; it falls back to ``query + (0, 0, radius)``.
    Accepts a single point (3,) or an array (M, 3).
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    q = np.asarray(query, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    safe = np.where(norm > DEGENERATE_NORM, norm, 1.0)
    fallback = np.zeros_like(q)
    fallback[..., 2] = 1.0
    direction = np.where(norm > DEGENERATE_NORM, q / safe, fallback)
    return q + radius * direction


def support_points(points, nbrs: NeighborhoodIndex) -> SupportPoints:
    pts = _as_points(points)
    idx = center_points(pts, nbrs.neighbor_lists)
    return SupportPoints(
        center_index=idx,
        center=pts[idx],
        intersection=support_intersection(pts[nbrs.query_indices], nbrs.radius),
        radius=nbrs.radius,
    )
