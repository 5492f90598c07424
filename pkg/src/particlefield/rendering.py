"""Volume rendering over the particle field.

Rays are clipped to the unit cube (all particles live there; outside is free
space by construction), sampled with stratified jitter, culled against a
coarse occupancy grid, and culled again where the encoding has no support.
Surviving samples run through encoding + MLP and are alpha-composited front
to back over a constant background. The backward pass is hand-derived and
shares every intermediate with the forward pass.

Throughout, per-ray quantities for a batch are stored flat: one array over
all surviving samples plus a parallel `ray_id`, ray-major and ascending in t.
Per-ray reductions are bincounts / segment scans over that layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .cameras import Ray, camera_rays
from .encoding import (
    EncodingCache,
    EncodingGradients,
    ParticleCloud,
    accumulate_gradients,
    interpolate_features,
    neighbor_counts,
    pair_weights,
)
from .errors import (
    InvalidDensityError,
    InvalidInputError,
    InvalidRayError,
    InvalidShapeError,
)
from .network import FieldParams, encode_direction, encode_directions, field_backward, field_forward
from .neighbors import SpatialIndex

WHITE = (1.0, 1.0, 1.0)


# ---------------------------------------------------------------------------
# occupancy grid


@dataclass
class OccupancyGrid:
    """Coarse boolean map of where the field has meaningful density."""

    resolution: int
    threshold: float
    occupied: np.ndarray  # (res, res, res) bool

    @property
    def cell_centers(self) -> np.ndarray:
        res = self.resolution
        axis = (np.arange(res) + 0.5) / res
        grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
        return grid.reshape(-1, 3)


def make_occupancy_grid(resolution=32, threshold=None) -> OccupancyGrid:
    """Fresh all-occupied grid; threshold defaults to 0.01 * resolution."""
    if resolution < 1:
        raise InvalidInputError(f"resolution must be >= 1, got {resolution}")
    if threshold is None:
        threshold = 0.01 * resolution
    return OccupancyGrid(
        int(resolution), float(threshold), np.ones((resolution,) * 3, bool)
    )


def update_occupancy(grid: OccupancyGrid, evaluator) -> None:
    """Full refresh: cell bit = density at cell center above threshold.

    `evaluator` maps (K, 3) points to (K,) densities. No hysteresis or decay;
    cells flip freely in both directions so motion never strands stale bits.
    """
    densities = np.asarray(evaluator(grid.cell_centers))
    if densities.shape != (grid.resolution**3,):
        raise InvalidShapeError("evaluator returned wrong number of densities")
    grid.occupied = (densities > grid.threshold).reshape((grid.resolution,) * 3)


def occupied_at(grid: OccupancyGrid, points) -> np.ndarray:
    """Boolean mask of points inside the cube and in occupied cells."""
    pts = np.asarray(points)
    inside = ((pts >= 0.0) & (pts <= 1.0)).all(axis=-1)
    idx = np.clip((pts * grid.resolution).astype(np.int64), 0, grid.resolution - 1)
    return inside & grid.occupied[idx[..., 0], idx[..., 1], idx[..., 2]]


def density_probe(cloud: ParticleCloud, index: SpatialIndex, params: FieldParams, points, direction=(0.0, 0.0, 1.0)):
    """Density at points under a canonical viewing direction.

    Points with no in-range particles are free space: exactly zero density,
    no MLP evaluation.
    """
    pts = np.asarray(points)
    cache = pair_weights(cloud, index, pts)
    counts = neighbor_counts(cache)
    out = np.zeros(pts.shape[0], pts.dtype)
    covered = np.nonzero(counts > 0)[0]
    if len(covered) == 0:
        return out
    feats = interpolate_features(cloud, cache)[covered]
    denc = np.broadcast_to(
        encode_direction(np.asarray(direction, feats.dtype)), (len(covered), 16)
    )
    sigma, _, _ = field_forward(params, feats, denc)
    out[covered] = sigma
    return out


# ---------------------------------------------------------------------------
# ray sampling


@dataclass
class RaySamples:
    """Ordered samples along one ray after culling."""

    t: np.ndarray  # (N,) ascending
    points: np.ndarray  # (N, 3)
    deltas: np.ndarray  # (N,) spacing to the next sample; last one to far
    origin: np.ndarray
    direction: np.ndarray


def sample_along_ray(ray: Ray, near, far, n, grid=None, rng=None) -> RaySamples:
    """Stratified samples of [near, far): one per bin, jittered by `rng`.

    With rng=None samples sit at the bin left edges. Samples in unoccupied
    grid cells are dropped; deltas are the spacing between the samples that
    remain, the last one reaching to `far`.
    """
    o = np.asarray(ray.origin, np.float64)
    d = np.asarray(ray.direction, np.float64)
    if o.shape != (3,) or d.shape != (3,):
        raise InvalidShapeError("ray origin/direction must be shape (3,)")
    if not np.isfinite(d).all() or not np.isfinite(o).all() or (d == 0).all():
        raise InvalidRayError("ray direction must be finite and nonzero")
    if not 0 <= near < far or n < 1:
        raise InvalidInputError(f"need 0 <= near < far and n >= 1")
    u = rng.random(n) if rng is not None else np.zeros(n)
    t = near + (far - near) * (np.arange(n) + u) / n
    points = o[None, :] + t[:, None] * d[None, :]
    if grid is not None:
        keep = occupied_at(grid, points)
        t, points = t[keep], points[keep]
    deltas = np.empty_like(t)
    if len(t):
        deltas[:-1] = np.diff(t)
        deltas[-1] = far - t[-1]
    return RaySamples(t, points, deltas, o, d)


def clip_to_unit_cube(origins, dirs, near):
    """Per-ray [tmin, tmax] of the segment inside the unit cube, slab method.

    Returns (tmin, tmax, hit); rays that miss the cube get hit=False.
    """
    o = np.asarray(origins)
    d = np.asarray(dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (0.0 - o) / d
        t1 = (1.0 - o) / d
        lo = np.fmin(t0, t1)  # fmin/fmax drop the NaNs from 0/0 edges
        hi = np.fmax(t0, t1)
    lo = np.where(np.isnan(lo), -np.inf, lo)
    hi = np.where(np.isnan(hi), np.inf, hi)
    tmin = np.maximum(lo.max(axis=1), near)
    tmax = hi.min(axis=1)
    hit = tmax > tmin
    return tmin, np.maximum(tmax, tmin), hit


# ---------------------------------------------------------------------------
# compositing


@dataclass
class RenderOutput:
    """Composited color for one ray plus everything backward needs."""

    color: np.ndarray  # (3,)
    weights: np.ndarray  # (N,)
    trans_tail: float  # transmittance left after the last sample
    colors: np.ndarray
    densities: np.ndarray
    deltas: np.ndarray
    background: np.ndarray
    trans: np.ndarray  # (N,) transmittance arriving at each sample


def _check_composite_inputs(colors, densities, deltas):
    c = np.asarray(colors)
    s = np.asarray(densities)
    d = np.asarray(deltas)
    if c.ndim != 2 or c.shape[1] != 3 or s.shape != (c.shape[0],) or d.shape != s.shape:
        raise InvalidShapeError(
            f"colors {c.shape}, densities {s.shape}, deltas {d.shape} disagree"
        )
    if s.size and (not np.isfinite(s).all() or (s < 0).any()):
        raise InvalidDensityError("densities must be finite and >= 0")
    if d.size and (not np.isfinite(d).all() or (d < 0).any()):
        raise InvalidInputError("deltas must be finite and >= 0")
    return c, s, d


def composite_ray(colors, densities, deltas, background=WHITE) -> RenderOutput:
    """Front-to-back alpha compositing of one ray over a constant background.

    weight_i = T_i * (1 - exp(-sigma_i * delta_i)) with T the transmittance
    accumulated before sample i; leftover transmittance lights the background.
    Weights plus the tail always sum to one.
    """
    c, s, d = _check_composite_inputs(colors, densities, deltas)
    bg = np.asarray(background, c.dtype if c.size else np.float64)
    sd = s * d
    trans = np.exp(-(np.cumsum(sd) - sd))
    alpha = -np.expm1(-sd)
    weights = trans * alpha
    tail = float(np.exp(-sd.sum()))
    color = weights @ c + tail * bg
    return RenderOutput(color, weights, tail, c, s, d, bg, trans)


def composite_backward(output: RenderOutput, d_color):
    """Gradients of the composited color wrt per-sample colors and densities.

    Density i dims every later sample and the background through the
    transmittance chain, hence the suffix term.
    """
    dC = np.asarray(d_color)
    if dC.shape != (3,):
        raise InvalidShapeError(f"d_color must be shape (3,), got {dC.shape}")
    w = output.weights
    d_colors = w[:, None] * dC[None, :]
    g = output.colors @ dC
    gw = g * w
    # transmittance just past sample i: T_{i+1}
    t_next = np.concatenate((output.trans[1:], [output.trans_tail]))
    suffix = (gw.sum() - np.cumsum(gw)) + (output.background @ dC) * output.trans_tail
    d_densities = output.deltas * (g * t_next - suffix)
    return d_colors, d_densities


@dataclass
class _FlatComposite:
    ray_id: np.ndarray
    colors: np.ndarray
    densities: np.ndarray
    deltas: np.ndarray
    background: np.ndarray
    trans: np.ndarray
    alpha: np.ndarray
    weights: np.ndarray
    sd: np.ndarray
    tails: np.ndarray
    n_rays: int


def _segment_excl(ray_id, values):
    """Per-sample exclusive prefix sum within each contiguous ray segment.

    Accumulated in float64: the global cumsum trick cancels two large
    prefixes, which single precision does not survive on big batches.
    """
    excl = np.cumsum(values, dtype=np.float64) - values
    if len(ray_id) == 0:
        return excl
    starts = np.empty(len(ray_id), bool)
    starts[0] = True
    starts[1:] = ray_id[1:] != ray_id[:-1]
    start_pos = np.nonzero(starts)[0]
    runs = np.diff(np.append(start_pos, len(ray_id)))
    return excl - np.repeat(excl[start_pos], runs)


def composite_flat(ray_id, colors, densities, deltas, n_rays, background):
    """Batch compositing over the flat sample layout. Empty rays -> background."""
    bg = np.asarray(background, colors.dtype if colors.size else np.float64)
    sd = densities * deltas
    dtype = sd.dtype if sd.size else np.float64
    trans = np.exp(-_segment_excl(ray_id, sd)).astype(dtype, copy=False)
    alpha = -np.expm1(-sd)
    weights = trans * alpha
    totals = np.bincount(ray_id, weights=sd, minlength=n_rays)
    tails = np.exp(-totals).astype(dtype, copy=False)
    out = np.empty((n_rays, 3), np.float64)
    for ch in range(3):
        out[:, ch] = np.bincount(
            ray_id, weights=weights * colors[:, ch], minlength=n_rays
        )
    out = out.astype(bg.dtype, copy=False) + tails[:, None] * bg
    cache = _FlatComposite(
        ray_id, colors, densities, deltas, bg, trans, alpha, weights, sd, tails, n_rays
    )
    return out, cache


def composite_flat_backward(cache: _FlatComposite, d_colors):
    """Backward of composite_flat for upstream (n_rays, 3) color gradients."""
    dC = np.asarray(d_colors)
    if dC.shape != (cache.n_rays, 3):
        raise InvalidShapeError(f"d_colors must be ({cache.n_rays}, 3)")
    dC_s = dC[cache.ray_id]
    d_cols = cache.weights[:, None] * dC_s
    g = np.einsum("ij,ij->i", cache.colors, dC_s)
    gw = g * cache.weights
    incl_local = _segment_excl(cache.ray_id, gw) + gw
    seg_tot = np.bincount(cache.ray_id, weights=gw, minlength=cache.n_rays)
    bg_dot = dC @ cache.background
    suffix = (seg_tot[cache.ray_id] - incl_local).astype(
        gw.dtype if gw.size else np.float64, copy=False
    ) + (bg_dot * cache.tails)[cache.ray_id]
    t_next = cache.trans * np.exp(-cache.sd)
    d_dens = cache.deltas * (g * t_next - suffix)
    return d_cols, d_dens


# ---------------------------------------------------------------------------
# loss and image metrics


def photometric_loss(pred, target, mode="squared"):
    """Color loss over a ray batch and its gradient wrt the predictions.

    squared: mean over rays of the squared Euclidean error (stable default).
    unsquared: sum over rays of the plain Euclidean norms; the gradient of a
    zero-error ray is zero.
    """
    p = np.asarray(pred)
    t = np.asarray(target)
    if p.shape != t.shape or p.ndim != 2 or p.shape[1] != 3:
        raise InvalidShapeError(f"pred {p.shape} and target {t.shape} must be (R, 3)")
    diff = p - t
    if mode == "squared":
        n = max(len(p), 1)
        loss = float(np.einsum("ij,ij->", diff, diff)) / n
        return loss, (2.0 / n) * diff
    if mode == "unsquared":
        norms = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        loss = float(norms.sum())
        safe = np.where(norms > 0, norms, 1.0)
        return loss, diff / safe[:, None]
    raise InvalidInputError(f"unknown loss mode {mode!r}")


def psnr(image, reference) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 99."""
    a = np.asarray(image, np.float64)
    b = np.asarray(reference, np.float64)
    if a.shape != b.shape:
        raise InvalidShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 99.0
    return min(99.0, 10.0 * np.log10(1.0 / mse))


_SSIM_RADIUS = 5  # 11-tap window
_SSIM_SIGMA = 1.5


def _ssim_window():
    x = np.arange(-_SSIM_RADIUS, _SSIM_RADIUS + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / _SSIM_SIGMA) ** 2)
    return k / k.sum()


def ssim(image, reference) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Standard constants K1=0.01, K2=0.03 at unit dynamic range; channels are
    averaged.
    """
    a = np.asarray(image, np.float64)
    b = np.asarray(reference, np.float64)
    if a.shape != b.shape or a.ndim not in (2, 3):
        raise InvalidShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    kernel = _ssim_window()

    def smooth(img):
        return convolve1d(
            convolve1d(img, kernel, axis=0, mode="reflect"), kernel, axis=1, mode="reflect"
        )

    c1, c2 = 0.01**2, 0.03**2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx, my = smooth(x), smooth(y)
        vx = smooth(x * x) - mx * mx
        vy = smooth(y * y) - my * my
        cxy = smooth(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / (
            (mx * mx + my * my + c1) * (vx + vy + c2)
        )
        scores.append(s.mean())
    return float(np.mean(scores))


def image_metrics(image, reference):
    """(psnr_db, ssim) of a rendered image against ground truth."""
    return psnr(image, reference), ssim(image, reference)


# ---------------------------------------------------------------------------
# full pipeline: encoding -> MLP -> compositing, forward and backward


@dataclass
class RenderConfig:
    n_samples: int = 128
    near: float = 0.05
    background: tuple = WHITE
    grid: OccupancyGrid | None = None
    seed: int = 0
    chunk: int = 16384
    # Zero-neighbor samples are free space by definition. Gradient checks can
    # switch the cull off so finite differences see a smooth function.
    cull_empty: bool = True


@dataclass
class RaysResult:
    colors: np.ndarray  # (R, 3)
    n_samples_kept: int
    loss: float | None = None
    field_grads: object = None
    encoding_grads: EncodingGradients | None = None


def _flatten_samples(origins, dirs, n_samples, near, jitter, grid):
    """Stratified per-ray samples inside the cube, flattened and culled."""
    n_rays = origins.shape[0]
    tmin, tmax, hit = clip_to_unit_cube(origins, dirs, near)
    if jitter is None:
        jitter = np.zeros((n_rays, n_samples), origins.dtype)
    width = np.where(hit, tmax - tmin, 0.0) / n_samples
    slots = np.arange(n_samples, dtype=origins.dtype)
    t = tmin[:, None] + (slots + jitter) * width[:, None]
    pts = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    keep = np.broadcast_to(hit[:, None], t.shape)
    if grid is not None:
        keep = keep & occupied_at(grid, pts)
    ray_id, slot = np.nonzero(keep)  # row-major: ray-major, t ascending
    return ray_id.astype(np.int64), t[ray_id, slot], pts[ray_id, slot], tmax


def _deltas_flat(ray_id, t, tmax):
    d = np.empty_like(t)
    if len(t) == 0:
        return d
    d[:-1] = t[1:] - t[:-1]
    last = np.empty(len(t), bool)
    last[-1] = True
    last[:-1] = ray_id[1:] != ray_id[:-1]
    d[last] = tmax[ray_id[last]] - t[last]
    return d


def _select_pairs(cache, keep_mask, new_pos):
    sel = keep_mask[cache.q_idx]
    return EncodingCache(
        new_pos[cache.q_idx[sel]],
        cache.p_idx[sel],
        cache.dist[sel],
        cache.weight[sel],
        cache.dweight[sel],
        cache.queries[keep_mask],
        int(keep_mask.sum()),
    )


def render_rays(
    cloud: ParticleCloud,
    index: SpatialIndex,
    params: FieldParams,
    origins,
    dirs,
    cfg: RenderConfig,
    jitter=None,
    gt=None,
    want_grads=False,
    loss_mode="squared",
) -> RaysResult:
    """Render a ray batch; optionally also backprop a photometric loss.

    This one code path serves training, evaluation renders, and the
    finite-difference harness, so the gradients are gradients of exactly the
    function the forward pass computes.
    """
    origins = np.asarray(origins)
    dirs = np.asarray(dirs)
    n_rays = origins.shape[0]
    ray_id, t, pts, tmax = _flatten_samples(
        origins, dirs, cfg.n_samples, cfg.near, jitter, cfg.grid
    )
    pcache = pair_weights(cloud, index, pts)
    if cfg.cull_empty:
        covered = neighbor_counts(pcache) > 0
        new_pos = np.cumsum(covered) - 1
        pcache = _select_pairs(pcache, covered, new_pos)
        ray_id, t = ray_id[covered], t[covered]
    feats = interpolate_features(cloud, pcache)
    denc = encode_directions(dirs)
    sigma, color, fcache = field_forward(params, feats, denc[ray_id])
    deltas = _deltas_flat(ray_id, t, tmax)
    colors, ccache = composite_flat(ray_id, color, sigma, deltas, n_rays, cfg.background)
    result = RaysResult(colors, len(t))
    if gt is None and not want_grads:
        return result
    loss, d_pred = photometric_loss(colors, np.asarray(gt), loss_mode)
    result.loss = loss
    if not want_grads:
        return result
    d_cols, d_dens = composite_flat_backward(ccache, d_pred)
    fgrads, d_feats = field_backward(fcache, d_dens, d_cols)
    egrads = EncodingGradients.zeros(cloud)
    accumulate_gradients(cloud, pcache, d_feats, egrads)
    result.field_grads = fgrads
    result.encoding_grads = egrads
    return result


def render_view(
    cloud: ParticleCloud,
    index: SpatialIndex,
    params: FieldParams,
    camera,
    cfg: RenderConfig,
) -> np.ndarray:
    """Render a full camera view to an (H, W, 3) float image in [0, 1]."""
    origins, dirs = camera_rays(camera)
    dtype = cloud.positions.dtype
    origins = origins.astype(dtype)
    dirs = dirs.astype(dtype)
    n_rays = origins.shape[0]
    rng = np.random.Generator(np.random.Philox(key=[cfg.seed, 0x52454E44]))
    jitter = rng.random((n_rays, cfg.n_samples), np.float32).astype(dtype, copy=False)
    out = np.empty((n_rays, 3), dtype)
    for lo in range(0, n_rays, cfg.chunk):
        hi = min(lo + cfg.chunk, n_rays)
        res = render_rays(
            cloud, index, params, origins[lo:hi], dirs[lo:hi], cfg, jitter[lo:hi]
        )
        out[lo:hi] = res.colors
    return np.clip(out.reshape(camera.height, camera.width, 3), 0.0, 1.0)
