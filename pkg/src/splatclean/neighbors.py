"""Exact k-nearest-neighbor search over point clouds.

Grid-bucketed ring search for large clouds, plain brute force below 4096
points. Both paths compute per-pair distances with the same arithmetic and
reduce them identically, so results are bit-for-bit equal — exactness, not
approximation, is the contract here.
"""

from __future__ import annotations

import numpy as np

BRUTE_FORCE_LIMIT = 4096


def _distances_to(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    d = points - q
    return np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])


def _topk_sorted(dist: np.ndarray, idx: np.ndarray, k: int):
    order = np.argsort(dist, kind="stable")[:k]
    return dist[order], idx[order]


def brute_force_knn(centers: np.ndarray, queries: np.ndarray, k: int):
    """Exact kNN by full scan. queries are indices into centers; the query
    point itself is excluded by index. Returns (distances (Q, k), indices (Q, k))."""
    centers = np.asarray(centers, dtype=np.float64)
    n = centers.shape[0]
    if n <= k:
        raise ValueError(f"kNN needs more than k={k} points, got {n}; use a smaller k")
    queries = np.asarray(queries, dtype=np.int64)
    dists = np.empty((queries.size, k))
    nbrs = np.empty((queries.size, k), dtype=np.int64)
    all_idx = np.arange(n, dtype=np.int64)
    for row, qi in enumerate(queries):
        mask = all_idx != qi
        cand_idx = all_idx[mask]
        d = _distances_to(centers[cand_idx], centers[qi])
        dists[row], nbrs[row] = _topk_sorted(d, cand_idx, k)
    return dists, nbrs


class _Grid:
    """Uniform cubic grid over the cloud's bounding box with bucketed indices."""

    def __init__(self, centers: np.ndarray):
        self.centers = centers
        n = centers.shape[0]
        self.lo = centers.min(axis=0)
        hi = centers.max(axis=0)
        span = np.maximum(hi - self.lo, 1e-12)
        # aim for a handful of points per cell
        cells_per_axis = max(1, int(np.floor((n / 4.0) ** (1.0 / 3.0))))
        self.res = np.minimum(cells_per_axis, 256) * np.ones(3, dtype=np.int64)
        self.cell = span / self.res
        coords = np.floor((centers - self.lo) / self.cell).astype(np.int64)
        coords = np.clip(coords, 0, self.res - 1)
        self.coords = coords
        flat = (coords[:, 0] * self.res[1] + coords[:, 1]) * self.res[2] + coords[:, 2]
        order = np.argsort(flat, kind="stable")
        self.sorted_idx = order
        self.sorted_flat = flat[order]

    def cell_points(self, cx: int, cy: int, cz: int) -> np.ndarray:
        flat = (cx * self.res[1] + cy) * self.res[2] + cz
        left = np.searchsorted(self.sorted_flat, flat, side="left")
        right = np.searchsorted(self.sorted_flat, flat, side="right")
        return self.sorted_idx[left:right]

    def ring_cells(self, c0: np.ndarray, ring: int):
        """Cells at Chebyshev distance exactly `ring` from c0, clipped to the grid."""
        if ring == 0:
            yield tuple(c0)
            return
        lo = c0 - ring
        hi = c0 + ring
        for cx in range(max(lo[0], 0), min(hi[0], self.res[0] - 1) + 1):
            for cy in range(max(lo[1], 0), min(hi[1], self.res[1] - 1) + 1):
                on_x = cx == lo[0] or cx == hi[0]
                on_y = cy == lo[1] or cy == hi[1]
                if on_x or on_y:
                    for cz in range(max(lo[2], 0), min(hi[2], self.res[2] - 1) + 1):
                        yield (cx, cy, cz)
                else:
                    for cz in (lo[2], hi[2]):
                        if 0 <= cz <= self.res[2] - 1:
                            yield (cx, cy, cz)

    def min_dist_outside(self, q: np.ndarray, ring: int) -> float:
        """Lower bound on the distance from q to any point in a cell with
        Chebyshev distance > ring from q's cell."""
        c0 = np.clip(np.floor((q - self.lo) / self.cell).astype(np.int64), 0, self.res - 1)
        lo_edge = self.lo + (c0 - ring) * self.cell
        hi_edge = self.lo + (c0 + ring + 1) * self.cell
        gap = np.minimum(q - lo_edge, hi_edge - q)
        return float(np.min(gap))


def grid_knn(centers: np.ndarray, queries: np.ndarray, k: int):
    """Exact kNN via expanding ring search over a uniform grid.

    Same return convention and bit-identical results to brute_force_knn.
    """
    centers = np.asarray(centers, dtype=np.float64)
    n = centers.shape[0]
    if n <= k:
        raise ValueError(f"kNN needs more than k={k} points, got {n}; use a smaller k")
    queries = np.asarray(queries, dtype=np.int64)
    grid = _Grid(centers)
    max_ring = int(grid.res.max())

    dists = np.empty((queries.size, k))
    nbrs = np.empty((queries.size, k), dtype=np.int64)
    for row, qi in enumerate(queries):
        q = centers[qi]
        c0 = np.clip(np.floor((q - grid.lo) / grid.cell).astype(np.int64), 0, grid.res - 1)
        gathered: list[np.ndarray] = []
        count = 0
        kth_best = np.inf
        ring = 0
        while True:
            new = [grid.cell_points(cx, cy, cz) for (cx, cy, cz) in grid.ring_cells(c0, ring)]
            if new:
                block = np.concatenate(new)
                block = block[block != qi]
                if block.size:
                    gathered.append(block)
                    count += block.size
            if count >= k:
                cand = np.concatenate(gathered)
                d = _distances_to(centers[cand], q)
                kth_best = np.partition(d, k - 1)[k - 1]
                if kth_best <= grid.min_dist_outside(q, ring):
                    break
            if ring >= max_ring:
                break
            ring += 1
        cand = np.concatenate(gathered)
        d = _distances_to(centers[cand], q)
        dists[row], nbrs[row] = _topk_sorted(d, cand, k)
    return dists, nbrs


def knn(centers: np.ndarray, queries: np.ndarray, k: int):
    """Exact kNN; picks brute force below BRUTE_FORCE_LIMIT points."""
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape[0] < BRUTE_FORCE_LIMIT:
        return brute_force_knn(centers, queries, k)
    return grid_knn(centers, queries, k)
