"""Particle cloud state and the compactly-supported kernel encoding.

A query point's feature is the unnormalized kernel-weighted sum of the
features of every particle strictly within the search radius. The kernel is a
smooth bump that vanishes (with all derivatives) at the radius, so features
are smooth in both query and particle positions even as particles enter and
leave the support. No neighbors means the exact zero vector.

The un-normalized sum is deliberate: it leaves a density-like pressure on the
loss that pushes particles to spread instead of stacking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    InvalidInputError,
    InvalidRadiusError,
    InvalidShapeError,
    InvalidTransformError,
)
from .neighbors import SpatialIndex, query_pairs


@dataclass
class ParticleCloud:
    """Positions, velocities and learned features, one row per particle."""

    positions: np.ndarray  # (M, 3)
    velocities: np.ndarray  # (M, 3)
    features: np.ndarray  # (M, m)
    search_radius: float

    def __post_init__(self):
        p, v, f = self.positions, self.velocities, self.features
        if p.ndim != 2 or p.shape[1] != 3:
            raise InvalidShapeError(f"positions must be (M, 3), got {p.shape}")
        if v.shape != p.shape:
            raise InvalidShapeError(f"velocities {v.shape} != positions {p.shape}")
        if f.ndim != 2 or f.shape[0] != p.shape[0] or f.shape[1] < 1:
            raise InvalidShapeError(f"features must be (M, m>=1), got {f.shape}")
        for name, arr in (("positions", p), ("velocities", v), ("features", f)):
            if arr.size and not np.isfinite(arr).all():
                raise InvalidInputError(f"{name} contain NaN or inf")
        if not np.isfinite(self.search_radius) or self.search_radius <= 0:
            raise InvalidRadiusError(
                f"search_radius must be positive, got {self.search_radius}"
            )

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


def init_particles(
    count, feature_dim=4, seed=0, search_radius=0.06, dtype=np.float32
) -> ParticleCloud:
    """Cell-centered lattice filling the unit cube, small random features.

    The lattice has n = ceil(count^(1/3)) points per axis at (k + 0.5) / n and
    is truncated to `count`. Velocities start at zero, features uniform in
    [-0.01, 0.01].
    """
    if count < 0:
        raise InvalidInputError(f"count must be >= 0, got {count}")
    n = int(round(count ** (1.0 / 3.0))) if count else 0
    while n**3 < count:
        n += 1
    axis = (np.arange(n) + 0.5) / n
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    positions = grid.reshape(-1, 3)[:count]
    rng = np.random.default_rng(seed)
    features = rng.uniform(-0.01, 0.01, size=(count, feature_dim))
    return ParticleCloud(
        positions.astype(dtype),
        np.zeros((count, 3), dtype),
        features.astype(dtype),
        float(search_radius),
    )


def bump_kernel(r, s):
    """Smooth compact kernel w(r) = exp(-s^2 / (s^2 - r^2)) for r < s, else 0.

    Returns (w, dw_dr), both matching the shape of r. w(0) = e^-1 and the
    kernel vanishes with all derivatives at r = s, so there is no boundary
    kink for gradients to trip on.
    """
    if not np.isfinite(s) or s <= 0:
        raise InvalidRadiusError(f"support radius must be positive, got {s}")
    r = np.asarray(r)
    if r.size and (not np.isfinite(r).all() or (r < 0).any()):
        raise InvalidInputError("distances must be finite and >= 0")
    dtype = r.dtype if np.issubdtype(r.dtype, np.floating) else np.float64
    w = np.zeros(r.shape, dtype)
    dw = np.zeros(r.shape, dtype)
    inside = r < s
    ri = r[inside]
    den = s * s - ri * ri
    wi = np.exp(-s * s / den)
    w[inside] = wi
    dw[inside] = wi * (-2.0 * s * s * ri / (den * den))
    return w, dw


@dataclass
class EncodingGradients:
    """Accumulators for dL/d(features) and dL/d(positions)."""

    d_features: np.ndarray  # (M, m)
    d_positions: np.ndarray  # (M, 3)

    @classmethod
    def zeros(cls, cloud: ParticleCloud) -> "EncodingGradients":
        return cls(
            np.zeros_like(cloud.features), np.zeros_like(cloud.positions)
        )


@dataclass
class EncodingCache:
    """Neighbor pairs plus kernel values for one batch of query points.

    Built once in the forward pass and reused by the backward pass, so both
    see the identical pair set.
    """

    q_idx: np.ndarray  # (P,) query row per pair
    p_idx: np.ndarray  # (P,) particle id per pair
    dist: np.ndarray  # (P,)
    weight: np.ndarray  # (P,) kernel value
    dweight: np.ndarray  # (P,) kernel derivative wrt distance
    queries: np.ndarray  # (K, 3)
    n_queries: int


def pair_weights(cloud: ParticleCloud, index: SpatialIndex, queries) -> EncodingCache:
    """Find in-range (query, particle) pairs and evaluate the kernel on them."""
    q = np.asarray(queries)
    if q.ndim != 2 or q.shape[1] != 3:
        raise InvalidShapeError(f"queries must be (K, 3), got {q.shape}")
    qi, pi, dist = query_pairs(index, q, max_dist=cloud.search_radius)
    w, dw = bump_kernel(dist, cloud.search_radius)
    return EncodingCache(qi, pi, dist, w, dw, q, q.shape[0])


def neighbor_counts(cache: EncodingCache) -> np.ndarray:
    return np.bincount(cache.q_idx, minlength=cache.n_queries)


def interpolate_features(cloud: ParticleCloud, cache: EncodingCache) -> np.ndarray:
    """Kernel-weighted feature sums, (K, m). Zero rows where no neighbors."""
    m = cloud.feature_dim
    out_dtype = np.result_type(cloud.features.dtype, cache.weight.dtype)
    out = np.zeros((cache.n_queries, m), out_dtype)
    if len(cache.q_idx) == 0:
        return out
    contrib = cloud.features[cache.p_idx] * cache.weight[:, None]
    for d in range(m):
        # bincount accumulates in float64; cast back to keep dtype stable
        out[:, d] = np.bincount(
            cache.q_idx, weights=contrib[:, d], minlength=cache.n_queries
        )
    return out


def interpolate_feature(cloud: ParticleCloud, index: SpatialIndex, query) -> np.ndarray:
    """Feature vector at a single point."""
    q = np.asarray(query)
    if q.shape != (3,):
        raise InvalidShapeError(f"query must be shape (3,), got {q.shape}")
    return interpolate_features(cloud, pair_weights(cloud, index, q[None, :]))[0]


def accumulate_gradients(
    cloud: ParticleCloud,
    cache: EncodingCache,
    upstream,
    grads: EncodingGradients,
) -> None:
    """Scatter dL/d(query feature) into particle feature/position gradients.

    Per pair with weight w and distance r:
        dL/df_i  += w * upstream
        dL/dx_i  += (upstream . f_i) * w'(r) * (x_i - q) / r
    A pair at r = 0 contributes no position gradient (w'(0) = 0 and the
    direction is undefined).
    """
    up = np.asarray(upstream)
    if up.shape != (cache.n_queries, cloud.feature_dim):
        raise InvalidShapeError(
            f"upstream must be ({cache.n_queries}, {cloud.feature_dim}), got {up.shape}"
        )
    if grads.d_features.shape != cloud.features.shape:
        raise InvalidShapeError("gradient accumulator does not match cloud features")
    if len(cache.q_idx) == 0:
        return
    count = cloud.count
    u = up[cache.q_idx]
    fw = u * cache.weight[:, None]
    fdtype = grads.d_features.dtype
    for d in range(cloud.feature_dim):
        grads.d_features[:, d] += np.bincount(
            cache.p_idx, weights=fw[:, d], minlength=count
        ).astype(fdtype, copy=False)

    dot = np.einsum("ij,ij->i", u, cloud.features[cache.p_idx])
    safe = cache.dist > 0
    coef = np.where(
        safe, dot * cache.dweight / np.where(safe, cache.dist, 1.0), 0.0
    )
    diff = cloud.positions[cache.p_idx] - cache.queries[cache.q_idx]
    pdtype = grads.d_positions.dtype
    for a in range(3):
        grads.d_positions[:, a] += np.bincount(
            cache.p_idx, weights=coef * diff[:, a], minlength=count
        ).astype(pdtype, copy=False)


def backpropagate_to_particles(
    cloud: ParticleCloud,
    index: SpatialIndex,
    query,
    upstream,
    grads: EncodingGradients,
) -> None:
    """Single-query accumulation into existing gradient buffers."""
    q = np.asarray(query)
    if q.shape != (3,):
        raise InvalidShapeError(f"query must be shape (3,), got {q.shape}")
    up = np.asarray(upstream)
    if up.shape != (cloud.feature_dim,):
        raise InvalidShapeError(
            f"upstream must be shape ({cloud.feature_dim},), got {up.shape}"
        )
    cache = pair_weights(cloud, index, q[None, :])
    accumulate_gradients(cloud, cache, up[None, :], grads)


def clip_position_gradients(grads, max_norm):
    """Scale rows with Euclidean norm above max_norm down onto the ball.

    Rows at or under the cap pass through bit-identically; clipped rows keep
    their direction.
    """
    g = np.asarray(grads)
    if g.ndim != 2 or g.shape[1] != 3:
        raise InvalidShapeError(f"gradients must be (M, 3), got {g.shape}")
    norms = np.sqrt(np.einsum("ij,ij->i", g, g))
    over = norms > max_norm
    if not over.any():
        return g.copy()
    out = g.copy()
    # land a few ulps inside the ball so the cap holds under any rounding of
    # the norm, not just this summation order
    margin = 1.0 - 8.0 * np.finfo(g.dtype).eps
    scale = (max_norm / norms[over] * margin).astype(g.dtype, copy=False)
    out[over] *= scale[:, None]
    return out


def apply_rigid_transform(cloud: ParticleCloud, transform) -> ParticleCloud:
    """Rigidly move the whole cloud: positions mapped, velocities rotated,
    features untouched."""
    t4 = np.asarray(transform)
    if t4.shape != (4, 4):
        raise InvalidShapeError(f"transform must be (4, 4), got {t4.shape}")
    rot = t4[:3, :3]
    err = np.abs(rot @ rot.T - np.eye(3)).max()
    bottom = np.abs(t4[3] - np.array([0.0, 0.0, 0.0, 1.0])).max()
    if err > 1e-6 or bottom > 1e-6 or np.linalg.det(rot) < 0:
        raise InvalidTransformError("transform is not rigid (rotation + translation)")
    dtype = cloud.positions.dtype
    positions = (cloud.positions @ rot.T + t4[:3, 3]).astype(dtype, copy=False)
    velocities = (cloud.velocities @ rot.T).astype(dtype, copy=False)
    return ParticleCloud(
        positions, velocities, cloud.features.copy(), cloud.search_radius
    )
