"""Fixed-radius neighbor search over sorted uniform-grid cell lists.

Particles are binned into cells whose side is at least the search radius, so
every in-range neighbor of a query lies in the query's cell or one of its 26
adjacent cells. Membership is one permutation array sorted by cell id plus
per-cell offsets (the sorted-cell-list layout). Queries are batched and fully
vectorized; results are exact (strict ``< radius``), never approximate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    IndexTooCoarseError,
    InvalidInputError,
    InvalidRadiusError,
    InvalidShapeError,
)

# Finer than ~1/128 per axis the cell bookkeeping dominates the distance
# checks, so the grid stops refining there; completeness only needs
# cell_size >= radius, which any coarser grid satisfies.
_MAX_CELLS_PER_AXIS = 128

_STENCIL = np.stack(
    np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1], indexing="ij"), axis=-1
).reshape(-1, 3)


class NeighborHit(NamedTuple):
    index: int
    distance: float


@dataclass
class SpatialIndex:
    """Cell-list index over one snapshot of particle positions.

    Cells are stored on a grid padded with one empty ring, so every stencil
    neighbor of an in-range cell exists and the query path never branches on
    the cube boundary. Read-only after build; rebuild when positions move.
    """

    positions: np.ndarray  # (M, 3) frozen copy taken at build time
    radius: float
    cells_per_axis: int  # logical cells per axis (padding excluded)
    order: np.ndarray  # (M,) particle ids sorted by cell id
    cell_start: np.ndarray  # ((cells+2)^3 + 1,) prefix offsets into order
    sorted_positions: np.ndarray  # (M, 3) positions[order]; cache-friendly scans

    @property
    def count(self) -> int:
        return self.positions.shape[0]


def _check_points(points, name="positions"):
    pts = np.asarray(points)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidShapeError(f"{name} must be (N, 3), got {pts.shape}")
    if pts.size and not np.isfinite(pts).all():
        raise InvalidInputError(f"{name} contain NaN or inf")
    return pts


def _cells_for_radius(radius):
    if radius >= 1.0:
        return 1
    return min(_MAX_CELLS_PER_AXIS, max(1, int(1.0 / radius)))


def _cell_ids(points, n):
    """Flat padded-grid cell id per point; out-of-cube points clamp inward."""
    side = np.int32(n + 2)
    c = np.clip(np.floor(points * n).astype(np.int32), 0, n - 1) + np.int32(1)
    return (c[:, 0] * side + c[:, 1]) * side + c[:, 2]


def _stencil_offsets(n):
    side = n + 2
    return ((_STENCIL[:, 0] * side + _STENCIL[:, 1]) * side + _STENCIL[:, 2]).astype(
        np.int32
    )


def build_index(positions, radius) -> SpatialIndex:
    """Bin positions into a uniform grid with cell size >= radius."""
    pos = _check_points(positions)
    if not np.isfinite(radius) or radius <= 0:
        raise InvalidRadiusError(f"radius must be positive and finite, got {radius}")
    n = _cells_for_radius(radius)
    ids = _cell_ids(pos, n)
    order = np.argsort(ids, kind="stable").astype(np.int32)
    counts = np.bincount(ids, minlength=(n + 2) ** 3)
    cell_start = np.concatenate(([0], np.cumsum(counts))).astype(np.int32)
    frozen = np.array(pos, copy=True)
    frozen.setflags(write=False)
    sorted_pos = frozen[order]
    sorted_pos.setflags(write=False)
    return SpatialIndex(frozen, float(radius), n, order, cell_start, sorted_pos)


def _expand_runs(starts, counts):
    """Flatten variable-length [start, start+count) runs into one index array."""
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, np.int32)
    ends = np.cumsum(counts)
    bases = (starts - (ends - counts)).astype(np.int32)
    return np.repeat(bases, counts) + np.arange(total, dtype=np.int32)


def query_pairs(index, points, max_dist=None, positions=None, budget=250_000):
    """All (query, particle) pairs with distance < max_dist, vectorized.

    Args:
        index: SpatialIndex to walk.
        points: (K, 3) query points.
        max_dist: pair cutoff; defaults to the index radius and may not
            exceed it (the stencil only reaches one cell out).
        positions: override for the particle coordinates the distances are
            measured against (same length as the index). Candidates are still
            enumerated from the build-time cells, so this is only complete
            while points have drifted less than (radius - max_dist) / 2.
        budget: cap on candidate pairs held in memory at once.

    Returns:
        (query_idx, particle_idx, distance) arrays; pair order is
        deterministic (query-major, stencil order, build order within cells).
    """
    pts = _check_points(points, "query points")
    if max_dist is None:
        max_dist = index.radius
    if max_dist > index.radius:
        raise IndexTooCoarseError(
            f"max_dist {max_dist} exceeds index radius {index.radius}"
        )
    if positions is None:
        src_sorted = index.sorted_positions
    else:
        src_sorted = np.asarray(positions)[index.order]
    n = index.cells_per_axis
    n_queries = pts.shape[0]
    dist_dtype = np.result_type(pts.dtype, src_sorted.dtype, np.float32)
    empty = (
        np.empty(0, np.int32),
        np.empty(0, np.int32),
        np.empty(0, dist_dtype),
    )
    if n_queries == 0 or index.count == 0:
        return empty

    # padded ids: all 27 stencil cells exist, the border ring is just empty
    ids = (_cell_ids(pts, n)[:, None] + _stencil_offsets(n)[None, :]).reshape(-1)
    run_start = index.cell_start[ids]
    run_count = index.cell_start[ids + 1] - run_start
    run_query = np.repeat(np.arange(n_queries, dtype=np.int32), 27)

    cutoff2 = max_dist * max_dist
    cum = np.cumsum(run_count, dtype=np.int64)
    total = int(cum[-1]) if len(cum) else 0
    if total == 0:
        return empty

    out_q, out_p, out_d = [], [], []
    lo = 0
    done = 0
    while lo < len(run_count):
        hi = int(np.searchsorted(cum, done + budget, side="left")) + 1
        hi = min(max(hi, lo + 1), len(run_count))
        src_slots = _expand_runs(run_start[lo:hi], run_count[lo:hi])
        done = int(cum[hi - 1])
        if len(src_slots):
            cand_q = np.repeat(run_query[lo:hi], run_count[lo:hi])
            diff = pts[cand_q].astype(dist_dtype, copy=False)
            diff -= src_sorted[src_slots]
            d2 = np.einsum("ij,ij->i", diff, diff)
            keep = d2 < cutoff2
            out_q.append(cand_q[keep])
            # particle ids only materialize for survivors
            out_p.append(index.order[src_slots[keep]])
            out_d.append(np.sqrt(d2[keep]))
        lo = hi
    return (
        np.concatenate(out_q) if out_q else empty[0],
        np.concatenate(out_p) if out_p else empty[1],
        np.concatenate(out_d).astype(dist_dtype, copy=False) if out_d else empty[2],
    )


def query_radius(index, point) -> list[NeighborHit]:
    """Particles strictly within the index radius of one point.

    Hits come back sorted by (distance, particle id).
    """
    pt = np.asarray(point)
    if pt.shape != (3,):
        raise InvalidShapeError(f"point must be shape (3,), got {pt.shape}")
    _, p, d = query_pairs(index, pt[None, :])
    sel = np.lexsort((p, d))
    return [NeighborHit(int(p[i]), float(d[i])) for i in sel]


def brute_force_query(positions, point, radius) -> list[NeighborHit]:
    """O(M) reference: scan every particle. Oracle for the index."""
    pos = _check_points(positions)
    pt = np.asarray(point)
    if pt.shape != (3,):
        raise InvalidShapeError(f"point must be shape (3,), got {pt.shape}")
    if not np.isfinite(radius) or radius < 0:
        raise InvalidRadiusError(f"radius must be >= 0 and finite, got {radius}")
    diff = pt[None, :] - pos
    d2 = np.einsum("ij,ij->i", diff, diff)
    keep = np.nonzero(d2 < radius * radius)[0]
    d = np.sqrt(d2[keep])
    sel = np.lexsort((keep, d))
    return [NeighborHit(int(keep[i]), float(d[i])) for i in sel]


def collision_pairs(index, positions, min_dist):
    """Unordered particle pairs closer than min_dist, as (i, j, dist), i < j.

    Distances are measured on `positions`, which may have drifted from the
    snapshot the index was built on (the physics step integrates first and
    resolves after); candidate enumeration still uses the build-time cells.
    """
    pos = _check_points(positions)
    if pos.shape[0] != index.count:
        raise InvalidShapeError(
            f"positions rows {pos.shape[0]} != indexed count {index.count}"
        )
    if not np.isfinite(min_dist) or min_dist <= 0:
        raise InvalidRadiusError(f"min_dist must be positive, got {min_dist}")
    q, p, d = query_pairs(index, pos, max_dist=min_dist, positions=pos)
    keep = p > q
    q, p, d = q[keep], p[keep], d[keep]
    sel = np.lexsort((p, q))
    return [(int(q[i]), int(p[i]), float(d[i])) for i in sel]
