"""Field head: spherical-harmonics direction encoding, a three-layer MLP with
hand-written reverse-mode gradients, and a minimal Adam.

The MLP is fused: one stack maps (particle feature, encoded direction) to
(raw density, raw rgb) in a single output layer. Density goes through exp,
color through a sigmoid, so density is strictly positive and color lives in
(0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidCacheError, InvalidDirectionError, InvalidShapeError

HIDDEN = 64
DIR_ENC_DIM = 16
# output-head exponent clamp; keeps exp/sigmoid finite in single precision
EXP_CAP = 15.0

# Real spherical-harmonics constants through degree 3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def encode_directions(dirs) -> np.ndarray:
    """Degree-3 real spherical harmonics of unit vectors, (K, 16)."""
    d = np.asarray(dirs)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    if d.shape[1] != 3:
        raise InvalidShapeError(f"directions must be (K, 3), got {d.shape}")
    norms = np.einsum("ij,ij->i", d, d)
    if d.size and np.abs(norms - 1.0).max() > 2e-6:
        raise InvalidDirectionError("directions must be unit length")
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out = np.empty((d.shape[0], DIR_ENC_DIM), d.dtype)
    out[:, 0] = SH_C0
    out[:, 1] = -SH_C1 * y
    out[:, 2] = SH_C1 * z
    out[:, 3] = -SH_C1 * x
    out[:, 4] = SH_C2[0] * xy
    out[:, 5] = SH_C2[1] * yz
    out[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    out[:, 7] = SH_C2[3] * xz
    out[:, 8] = SH_C2[4] * (xx - yy)
    out[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
    out[:, 10] = SH_C3[1] * xy * z
    out[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    out[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    out[:, 14] = SH_C3[5] * z * (xx - yy)
    out[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out[0] if single else out


def encode_direction(direction) -> np.ndarray:
    d = np.asarray(direction)
    if d.shape != (3,):
        raise InvalidShapeError(f"direction must be shape (3,), got {d.shape}")
    return encode_directions(d)


@dataclass
class FieldParams:
    """Weights of the fused density/color MLP.

    `version` counts mutations; forward caches pin the version they saw so a
    backward pass against updated weights is rejected instead of silently
    mixing steps.
    """

    w1: np.ndarray  # (64, m + 16)
    b1: np.ndarray  # (64,)
    w2: np.ndarray  # (64, 64)
    b2: np.ndarray  # (64,)
    w3: np.ndarray  # (4, 64)
    b3: np.ndarray  # (4,)
    version: int = 0

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[1] - DIR_ENC_DIM

    def arrays(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]


@dataclass
class FieldGradients:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def arrays(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]


def init_field_params(feature_dim, seed=0, dtype=np.float32) -> FieldParams:
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)

    def he(fan_out, fan_in):
        limit = np.sqrt(6.0 / fan_in)
        return rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)

    in_dim = feature_dim + DIR_ENC_DIM
    return FieldParams(
        he(HIDDEN, in_dim),
        np.zeros(HIDDEN, dtype),
        he(HIDDEN, HIDDEN),
        np.zeros(HIDDEN, dtype),
        he(4, HIDDEN),
        np.zeros(4, dtype),
    )


@dataclass
class FieldCache:
    params: FieldParams
    version: int
    x: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    sigma: np.ndarray
    color: np.ndarray
    single: bool


def field_forward(params: FieldParams, features, dir_enc):
    """Map (feature, encoded direction) to (density, rgb).

    Accepts a single sample or a batch; returns (sigma, color, cache) with
    sigma > 0 and color in (0, 1).
    """
    f = np.asarray(features)
    d = np.asarray(dir_enc)
    single = f.ndim == 1
    f = np.atleast_2d(f)
    d = np.atleast_2d(d)
    if f.shape[1] != params.feature_dim:
        raise InvalidShapeError(
            f"feature dim {f.shape[1]} != model dim {params.feature_dim}"
        )
    if d.shape[1] != DIR_ENC_DIM or d.shape[0] != f.shape[0]:
        raise InvalidShapeError(
            f"direction encodings must be ({f.shape[0]}, {DIR_ENC_DIM}), got {d.shape}"
        )
    x = np.concatenate([f, d], axis=1)
    h1 = np.maximum(x @ params.w1.T + params.b1, 0.0)
    h2 = np.maximum(h1 @ params.w2.T + params.b2, 0.0)
    y = h2 @ params.w3.T + params.b3
    # cap the exponent: unbounded exp overflows float32 once particles chase a
    # moving surface, and opacity is saturated long before e^15 anyway; the
    # backward pass keeps the clamped slope exp(y_clipped) = sigma
    sigma = np.exp(np.clip(y[:, 0], -EXP_CAP, EXP_CAP))
    color = 1.0 / (1.0 + np.exp(-np.clip(y[:, 1:4], -EXP_CAP, EXP_CAP)))
    cache = FieldCache(params, params.version, x, h1, h2, sigma, color, single)
    if single:
        return sigma[0], color[0], cache
    return sigma, color, cache


def field_backward(cache: FieldCache, d_sigma, d_color):
    """Backprop (dL/dsigma, dL/dcolor) to weights and input features.

    The direction-encoding slice of the input gradient is discarded: view
    directions are not optimized.
    """
    params = cache.params
    if params.version != cache.version:
        raise InvalidCacheError(
            "forward cache is stale: params changed since field_forward"
        )
    ds = np.atleast_1d(np.asarray(d_sigma))
    dc = np.atleast_2d(np.asarray(d_color))
    n = cache.h1.shape[0]
    if ds.shape != (n,) or dc.shape != (n, 3):
        raise InvalidShapeError(
            f"upstream shapes {ds.shape}, {dc.shape} do not match batch {n}"
        )
    dy = np.empty((n, 4), cache.x.dtype)
    dy[:, 0] = ds * cache.sigma
    dy[:, 1:4] = dc * cache.color * (1.0 - cache.color)

    g_w3 = dy.T @ cache.h2
    g_b3 = dy.sum(axis=0)
    dh2 = (dy @ params.w3) * (cache.h2 > 0)
    g_w2 = dh2.T @ cache.h1
    g_b2 = dh2.sum(axis=0)
    dh1 = (dh2 @ params.w2) * (cache.h1 > 0)
    g_w1 = dh1.T @ cache.x
    g_b1 = dh1.sum(axis=0)
    d_features = (dh1 @ params.w1)[:, : params.feature_dim]
    if cache.single:
        d_features = d_features[0]
    return FieldGradients(g_w1, g_b1, g_w2, g_b2, g_w3, g_b3), d_features


@dataclass
class AdamState:
    """First/second moment buffers for one list of parameter arrays."""

    m: list
    v: list
    t: int
    lr: float
    beta1: float
    beta2: float
    eps: float


def adam_init(params, lr=0.01, beta1=0.9, beta2=0.99, eps=1e-10) -> AdamState:
    return AdamState(
        [np.zeros_like(p) for p in params],
        [np.zeros_like(p) for p in params],
        0,
        lr,
        beta1,
        beta2,
        eps,
    )


def adam_step(state: AdamState, params, grads) -> None:
    """One bias-corrected Adam update, in place on the parameter arrays."""
    if len(params) != len(state.m) or len(grads) != len(state.m):
        raise InvalidShapeError("param/grad list length does not match state")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise InvalidShapeError(f"param {p.shape} vs grad {g.shape}")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def step_field(params: FieldParams, state: AdamState, grads: FieldGradients) -> None:
    """Adam-update the MLP weights and invalidate outstanding caches."""
    adam_step(state, params.arrays(), grads.arrays())
    params.version += 1
