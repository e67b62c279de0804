"""Incremental voxel-hash point map with exact k-nearest-neighbor queries.

Each occupied voxel holds a small (n, 3) point array; cells are keyed by
their integer coordinates packed into one int64 (21 bits per axis, so
coordinates must stay within about a million cells of the origin). Queries
expand Chebyshev shells of cells around the query point, which keeps
results exact among stored points up to the search radius cap.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

_AXIS_BITS = 21
_AXIS_OFF = 1 << (_AXIS_BITS - 1)
_AXIS_MASK = (1 << _AXIS_BITS) - 1


def pack_cells(cells) -> np.ndarray:
    """Pack integer cell coordinates (n, 3) into int64 keys."""
    cells = np.asarray(cells, dtype=np.int64)
    return (((cells[..., 0] + _AXIS_OFF) << (2 * _AXIS_BITS))
            | ((cells[..., 1] + _AXIS_OFF) << _AXIS_BITS)
            | (cells[..., 2] + _AXIS_OFF))


def _pack_one(cx: int, cy: int, cz: int) -> int:
    return (((cx + _AXIS_OFF) << (2 * _AXIS_BITS))
            | ((cy + _AXIS_OFF) << _AXIS_BITS)
            | (cz + _AXIS_OFF))


# Packing is linear in the (offset) coordinates, so a neighbor's key is the
# center key plus a constant delta.
_BLOCK_DELTAS = tuple(
    (dx << (2 * _AXIS_BITS)) + (dy << _AXIS_BITS) + dz
    for dx, dy, dz in product((-1, 0, 1), repeat=3))


@dataclass
class Plane:
    """uT q + offset == 0 for on-plane q; fit_residual is the worst |uT q + d|."""

    normal: np.ndarray
    offset: float
    fit_residual: float


def plane_fit_batch(stacks, max_residual: float = 0.1, cond_limit: float = 1e8):
    """Least-squares planes through stacked 5-point sets (m, 5, 3).

    Solves q_i . n = -1 per set, then normalizes. Returns
    (normals (m,3), offsets (m,), residuals (m,), valid (m,)); a set is
    invalid when the solve is ill-conditioned (near-collinear points) or the
    worst point-plane distance exceeds max_residual.
    """
    stacks = np.asarray(stacks, dtype=float)
    m = stacks.shape[0]
    if m == 0:
        return (np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0, dtype=bool))
    u, s, vt = np.linalg.svd(stacks, full_matrices=False)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = s[:, 0] / s[:, -1]
    ok = np.isfinite(cond) & (cond <= cond_limit)

    inv_s = np.where(s > 0.0, 1.0 / np.where(s > 0.0, s, 1.0), 0.0)
    rhs = -np.ones((m, 5))
    # Min-norm least squares via the SVD: n = V diag(1/s) U^T rhs.
    n_raw = np.einsum("mij,mi->mj", vt, inv_s * np.einsum("mij,mi->mj", u, rhs))
    norms = np.linalg.norm(n_raw, axis=1)
    ok &= norms > 0.0
    safe = np.where(norms > 0.0, norms, 1.0)
    normals = n_raw / safe[:, None]
    offsets = 1.0 / safe
    dists = np.abs(np.einsum("mij,mj->mi", stacks, normals) + offsets[:, None])
    residuals = dists.max(axis=1)
    ok &= residuals <= max_residual
    return normals, offsets, residuals, ok


def plane_fit(points, max_residual: float = 0.1, cond_limit: float = 1e8) -> Plane | None:
    """Fit a plane through exactly 5 points; None when degenerate or loose."""
    points = np.asarray(points, dtype=float)
    if points.shape != (5, 3):
        raise ValueError("plane_fit expects exactly 5 points")
    normals, offsets, residuals, ok = plane_fit_batch(points[None], max_residual, cond_limit)
    if not ok[0]:
        return None
    return Plane(normals[0], float(offsets[0]), float(residuals[0]))


class VoxelMap:
    """Single-writer voxel-hash map (insert and query never interleave)."""

    def __init__(self, edge: float = 0.5, cell_cap: int = 32, search_radius: float = 5.0):
        if edge <= 0.0 or cell_cap < 1 or search_radius <= 0.0:
            raise ValueError("edge, cell_cap and search_radius must be positive")
        self.edge = edge
        self.cell_cap = cell_cap
        self.search_radius = search_radius
        self.min_separation = edge / 4.0
        self._cells: dict[int, np.ndarray] = {}
        self._count = 0
        self._cell_lo = np.full(3, np.iinfo(np.int64).max >> 2, dtype=np.int64)
        self._cell_hi = np.full(3, -(np.iinfo(np.int64).max >> 2), dtype=np.int64)

    def __len__(self) -> int:
        return self._count

    @property
    def points(self) -> np.ndarray:
        if not self._cells:
            return np.empty((0, 3))
        return np.concatenate(list(self._cells.values()))

    def insert(self, points) -> None:
        """Add world-frame points, honoring the per-cell cap.

        A full cell admits a newcomer only when it sits farther than the
        min-separation from every resident, in which case it replaces its
        nearest resident (occupancy never exceeds the cap).
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if not np.all(np.isfinite(points)):
            raise ValueError("insert expects finite points")
        cells = np.floor(points / self.edge).astype(np.int64)
        keys = pack_cells(cells)
        min_sep_sq = self.min_separation ** 2
        for point, cell_row, key in zip(points, cells, keys):
            members = self._cells.get(key)
            if members is None:
                self._cells[int(key)] = point[None, :].copy()
                self._count += 1
                np.minimum(self._cell_lo, cell_row, out=self._cell_lo)
                np.maximum(self._cell_hi, cell_row, out=self._cell_hi)
                continue
            if len(members) < self.cell_cap:
                self._cells[int(key)] = np.vstack([members, point])
                self._count += 1
                continue
            diff = members - point
            d2 = np.einsum("ij,ij->i", diff, diff)
            nearest = int(np.argmin(d2))
            if d2[nearest] > min_sep_sq:
                members[nearest] = point

    def _ring_points(self, center, radius: int) -> list:
        found = []
        if radius == 0:
            got = self._cells.get(_pack_one(*center))
            if got is not None:
                found.append(got)
            return found
        cx, cy, cz = center
        for dx, dy, dz in product(range(-radius, radius + 1), repeat=3):
            if max(abs(dx), abs(dy), abs(dz)) == radius:
                got = self._cells.get(_pack_one(cx + dx, cy + dy, cz + dz))
                if got is not None:
                    found.append(got)
        return found

    def _ring_span(self, center) -> tuple[int, int]:
        """Chebyshev cell distances from center to the nearest and farthest
        occupied-cell bounding-box corners; (1, 0) when the map is empty."""
        if self._count == 0:
            return 1, 0
        below = self._cell_lo - center
        above = center - self._cell_hi
        near = int(np.max(np.maximum(np.maximum(below, above), 0)))
        far = int(np.max(np.maximum(np.abs(center - self._cell_lo),
                                    np.abs(center - self._cell_hi))))
        return near, far

    def knn(self, query, k: int) -> np.ndarray:
        """Up to k nearest stored points within the search radius.

        Exact Euclidean nearest neighbors, ascending distance, ties broken
        by lexicographic coordinates. Returns fewer than k points when the
        radius cap prunes the search.
        """
        if k < 1:
            raise ValueError("k must be at least 1")
        query = np.asarray(query, dtype=float)
        center = tuple(np.floor(query / self.edge).astype(np.int64))
        cap_sq = self.search_radius ** 2
        ring_lo, ring_hi = self._ring_span(np.asarray(center))

        chunks: list = []
        best: np.ndarray | None = None
        best_d: np.ndarray | None = None
        radius = 0
        while True:
            if ring_lo <= radius <= ring_hi:
                chunks.extend(self._ring_points(center, radius))
                if chunks:
                    pts = np.concatenate(chunks)
                    diff = pts - query
                    d2 = np.einsum("ij,ij->i", diff, diff)
                    keep = d2 <= cap_sq
                    pts, d2 = pts[keep], d2[keep]
                    if len(d2):
                        order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], d2))[:k]
                        best, best_d = pts[order], d2[order]
            # Cells on ring radius+1 hold points no closer than radius*edge.
            floor_sq = (radius * self.edge) ** 2
            if best_d is not None and len(best_d) == k and best_d[-1] <= floor_sq:
                break
            if floor_sq > cap_sq or radius >= ring_hi:
                break
            radius += 1
        if best is None:
            return np.empty((0, 3))
        return best.copy()

    def _block_points(self, center_key: int) -> np.ndarray | None:
        cells = self._cells
        chunks = [got for delta in _BLOCK_DELTAS
                  if (got := cells.get(center_key + delta)) is not None]
        if not chunks:
            return None
        if len(chunks) == 1:
            return chunks[0]
        return np.concatenate(chunks)

    def knn_batch(self, queries, k: int) -> list[np.ndarray]:
        """knn for many queries; exact, same contract as knn.

        Each query first scans its 3x3x3 cell block; rows whose k-th
        distance the block cannot certify (beyond one edge, or tied with
        unscanned candidates) fall back to shell expansion.
        """
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        results: list = [None] * len(queries)
        # Beyond the scanned block means >= edge away; stay inside the cap too.
        certify_sq = min(self.edge, self.search_radius) ** 2
        keys = pack_cells(np.floor(queries / self.edge).astype(np.int64))
        for r in range(len(queries)):
            pts = self._block_points(int(keys[r]))
            if pts is None or len(pts) < k:
                results[r] = self.knn(queries[r], k)
                continue
            q = queries[r]
            diff = pts - q
            d2 = np.einsum("ij,ij->i", diff, diff)
            take = min(k + 8, len(pts))
            if take < len(pts):
                sub = np.argpartition(d2, take - 1)[:take]
            else:
                sub = np.arange(len(pts))
            d2r = d2[sub]
            sub_pts = pts[sub]
            order = np.lexsort((sub_pts[:, 2], sub_pts[:, 1], sub_pts[:, 0], d2r))[:k]
            d2k = d2r[order]
            # The subset max is the take-th smallest distance overall; a tie
            # there means unscanned candidates could win on coordinates.
            boundary_tied = take < len(pts) and d2k[-1] >= d2r.max() - 1e-18
            if d2k[-1] <= certify_sq and not boundary_tied:
                results[r] = sub_pts[order].copy()
            else:
                results[r] = self.knn(q, k)
        return results
