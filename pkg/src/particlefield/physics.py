"""Position-based dynamics on the particle cloud.

One step folds the (already clipped) loss gradient into damped velocities,
integrates, resolves pairwise minimum-distance constraints in a single
sequential pass, clamps to the unit cube, and recovers velocities from the
realized displacement. Moving positions first and deriving velocities after
is what keeps the constraint projection stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoding import ParticleCloud
from .errors import InvalidGradientError, InvalidInputError, InvalidShapeError
from .neighbors import SpatialIndex, collision_pairs


@dataclass
class PhysicsConfig:
    damping: float = 0.96  # velocity decay per step
    dt: float = 0.01  # integration timestep, seconds
    min_dist: float = 0.01  # pairwise minimum distance, meters
    gradient_scale: float = 2.0  # loss-gradient-to-velocity coupling

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise InvalidInputError(f"damping must be in (0, 1], got {self.damping}")
        if self.dt <= 0:
            raise InvalidInputError(f"dt must be positive, got {self.dt}")
        if self.min_dist < 0:
            raise InvalidInputError(f"min_dist must be >= 0, got {self.min_dist}")
        if self.gradient_scale < 0:
            raise InvalidInputError(
                f"gradient_scale must be >= 0, got {self.gradient_scale}"
            )


def resolve_collisions(positions, pairs, min_dist) -> None:
    """Project pairs closer than min_dist apart, symmetrically, in place.

    One sequential pass in the given pair order: each pair sees the positions
    left by the pairs before it (pairs may share particles). A pair at exact
    distance zero separates along +x, which keeps the step deterministic and
    NaN-free.
    """
    half = np.asarray([0.5 * min_dist, 0.0, 0.0], positions.dtype)
    for i, j, _ in pairs:
        d = positions[j] - positions[i]
        dist = float(np.sqrt(d @ d))
        if dist >= min_dist:
            continue  # separated by an earlier pair
        if dist == 0.0:
            positions[i] -= half
            positions[j] += half
            continue
        corr = (0.5 * (dist - min_dist) / dist) * d
        positions[i] += corr
        positions[j] -= corr


def pbd_step(
    cloud: ParticleCloud,
    position_grads,
    config: PhysicsConfig,
    index: SpatialIndex,
) -> None:
    """Advance the cloud one physics step, in place.

    Order: damp + gradient kick, integrate, resolve collisions (candidates
    from the pre-step index, distances on the integrated positions), clamp to
    the unit cube, recompute velocities from realized displacement.
    """
    g = np.asarray(position_grads)
    if g.shape != cloud.positions.shape:
        raise InvalidShapeError(
            f"gradients {g.shape} != positions {cloud.positions.shape}"
        )
    if g.size and not np.isfinite(g).all():
        raise InvalidGradientError("position gradients contain NaN or inf")

    x = cloud.positions
    v = cloud.velocities
    v *= config.damping
    v -= config.gradient_scale * g
    prev = x.copy()
    x += config.dt * v
    if config.min_dist > 0:
        pairs = collision_pairs(index, x, config.min_dist)
        resolve_collisions(x, pairs, config.min_dist)
    np.clip(x, 0.0, 1.0, out=x)
    v[:] = (x - prev) / config.dt
