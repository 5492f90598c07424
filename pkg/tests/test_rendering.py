"""Ray sampling, compositing forward/backward, losses, image metrics."""

import numpy as np
import pytest

from particlefield.cameras import Camera, Ray, look_at
from particlefield.encoding import ParticleCloud
from particlefield.errors import (
    InvalidDensityError,
    InvalidInputError,
    InvalidRayError,
    InvalidShapeError,
)
from particlefield.neighbors import build_index
from particlefield.network import init_field_params
from particlefield.rendering import (
    RenderConfig,
    clip_to_unit_cube,
    composite_backward,
    composite_flat,
    composite_flat_backward,
    composite_ray,
    density_probe,
    image_metrics,
    make_occupancy_grid,
    occupied_at,
    photometric_loss,
    psnr,
    render_rays,
    render_view,
    sample_along_ray,
    ssim,
    update_occupancy,
)

LN2 = float(np.log(2.0))


def make_cloud(positions, features, s=0.3, dtype=np.float64):
    positions = np.asarray(positions, dtype)
    features = np.asarray(features, dtype)
    return ParticleCloud(
        positions, np.zeros_like(positions), features, float(s)
    )


# ---------------------------------------------------------------------------
# cube clipping and sampling


def test_clip_straight_through():
    o = np.array([[0.5, 0.5, -1.0]])
    d = np.array([[0.0, 0.0, 1.0]])
    tmin, tmax, hit = clip_to_unit_cube(o, d, near=0.05)
    assert hit[0]
    assert tmin[0] == pytest.approx(1.0)
    assert tmax[0] == pytest.approx(2.0)


def test_clip_miss():
    o = np.array([[2.0, 2.0, -1.0]])
    d = np.array([[0.0, 0.0, 1.0]])
    _, _, hit = clip_to_unit_cube(o, d, near=0.05)
    assert not hit[0]


def test_clip_from_inside_respects_near():
    o = np.array([[0.5, 0.5, 0.5]])
    d = np.array([[0.0, 0.0, -1.0]])
    tmin, tmax, hit = clip_to_unit_cube(o, d, near=0.05)
    assert hit[0]
    assert tmin[0] == pytest.approx(0.05)
    assert tmax[0] == pytest.approx(0.5)


def test_samples_stratified_and_sorted():
    ray = Ray(np.array([0.5, 0.5, -1.0]), np.array([0.0, 0.0, 1.0]))
    rng = np.random.default_rng(0)
    s = sample_along_ray(ray, near=1.0, far=2.0, n=16, grid=None, rng=rng)
    assert len(s.t) == 16
    assert (np.diff(s.t) > 0).all()
    strata = (s.t - 1.0) / (1.0 / 16)  # one jittered sample per bin
    np.testing.assert_array_equal(np.floor(strata).astype(int), np.arange(16))


def test_sample_deltas_match_consecutive_differences():
    ray = Ray(np.array([0.5, 0.5, -1.0]), np.array([0.0, 0.0, 1.0]))
    s = sample_along_ray(ray, near=1.0, far=2.0, n=8, grid=None, rng=None)
    np.testing.assert_allclose(s.deltas[:-1], np.diff(s.t), rtol=1e-12)
    assert s.deltas[-1] == pytest.approx(2.0 - s.t[-1])


def test_all_unoccupied_grid_drops_everything():
    grid = make_occupancy_grid(8, 0.5)
    grid.occupied[:] = False
    ray = Ray(np.array([0.5, 0.5, -1.0]), np.array([0.0, 0.0, 1.0]))
    s = sample_along_ray(ray, near=1.0, far=2.0, n=16, grid=grid, rng=None)
    assert len(s.t) == 0


def test_partial_grid_keeps_occupied_cells_only():
    grid = make_occupancy_grid(2, 0.5)
    grid.occupied[:] = False
    grid.occupied[0, 0, 0] = True  # x,y,z < 0.5 octant
    ray = Ray(np.array([0.25, 0.25, -1.0]), np.array([0.0, 0.0, 1.0]))
    s = sample_along_ray(ray, near=1.0, far=2.0, n=64, grid=grid, rng=None)
    assert len(s.t) > 0
    z = s.t - 1.0  # z coordinate along the ray
    assert (z < 0.5).all()


def test_zero_direction_rejected():
    ray = Ray(np.array([0.5, 0.5, 0.5]), np.array([0.0, 0.0, 0.0]))
    with pytest.raises(InvalidRayError):
        sample_along_ray(ray, near=0.05, far=1.0, n=4, grid=None, rng=None)


def test_occupied_at_maps_points_to_cells():
    grid = make_occupancy_grid(4, 0.1)
    grid.occupied[:] = False
    grid.occupied[1, 2, 3] = True
    pts = np.array([[0.3, 0.6, 0.9], [0.3, 0.6, 0.1]])
    np.testing.assert_array_equal(occupied_at(grid, pts), [True, False])


# ---------------------------------------------------------------------------
# compositing


def test_transparent_gives_background():
    out = composite_ray(
        np.zeros((4, 3)), np.zeros(4), np.full(4, 0.1), background=(1.0, 1.0, 1.0)
    )
    np.testing.assert_allclose(out.color, 1.0)
    np.testing.assert_allclose(out.weights, 0.0)
    assert out.trans_tail == pytest.approx(1.0)


def test_single_sample_ln2():
    colors = np.array([[1.0, 0.0, 0.0]])
    out = composite_ray(colors, np.array([LN2]), np.array([1.0]), background=(0, 0, 0))
    assert out.weights[0] == pytest.approx(0.5, abs=1e-9)
    assert out.trans_tail == pytest.approx(0.5, abs=1e-9)


def test_two_samples_ln2():
    colors = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    out = composite_ray(
        colors, np.array([LN2, LN2]), np.array([1.0, 1.0]), background=(0.0, 0.0, 1.0)
    )
    np.testing.assert_allclose(out.weights, [0.5, 0.25], atol=1e-9)
    assert out.trans_tail == pytest.approx(0.25, abs=1e-9)
    np.testing.assert_allclose(out.color, [0.5, 0.25, 0.25], atol=1e-9)


def test_weights_and_tail_partition_unity():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        sigma = rng.exponential(2.0, n)
        deltas = rng.uniform(0.001, 0.2, n)
        colors = rng.random((n, 3))
        out = composite_ray(colors, sigma, deltas, background=(1, 1, 1))
        assert abs(out.weights.sum() + out.trans_tail - 1.0) <= 1e-6
        assert (np.diff(np.concatenate([[1.0], out.trans])) <= 1e-12).all()


def test_opaque_near_sample_occludes():
    sigma = np.array([1000.0, 5.0, 5.0])
    deltas = np.array([0.1, 0.1, 0.1])
    colors = np.ones((3, 3)) * 0.5
    out = composite_ray(colors, sigma, deltas, background=(0, 0, 0))
    assert (out.weights[1:] < 1e-6).all()


def test_negative_density_rejected():
    with pytest.raises(InvalidDensityError):
        composite_ray(np.ones((1, 3)), np.array([-0.1]), np.array([0.1]), (0, 0, 0))


def test_backward_color_gradient_is_weights():
    rng = np.random.default_rng(5)
    n = 6
    sigma = rng.exponential(1.0, n)
    deltas = rng.uniform(0.01, 0.2, n)
    colors = rng.random((n, 3))
    out = composite_ray(colors, sigma, deltas, background=(1, 1, 1))
    d_colors, _ = composite_backward(out, np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(d_colors[:, 0], out.weights, rtol=1e-12)
    np.testing.assert_allclose(d_colors[:, 1:], 0.0)


def test_backward_density_matches_finite_difference():
    rng = np.random.default_rng(6)
    n = 5
    sigma = rng.exponential(1.0, n)
    deltas = rng.uniform(0.01, 0.2, n)
    colors = rng.random((n, 3))
    up = rng.standard_normal(3)
    bg = (0.3, 0.3, 0.9)

    out = composite_ray(colors, sigma, deltas, bg)
    _, d_sigma = composite_backward(out, up)
    h = 1e-6
    for i in range(n):
        sp = sigma.copy()
        sp[i] += h
        sm = sigma.copy()
        sm[i] -= h
        lp = composite_ray(colors, sp, deltas, bg).color @ up
        lm = composite_ray(colors, sm, deltas, bg).color @ up
        fd = (lp - lm) / (2 * h)
        assert d_sigma[i] == pytest.approx(fd, rel=1e-6, abs=1e-10)


def test_zero_upstream_zero_grads():
    out = composite_ray(np.ones((2, 3)), np.ones(2), np.ones(2), (0, 0, 0))
    d_colors, d_sigma = composite_backward(out, np.zeros(3))
    assert not d_colors.any() and not d_sigma.any()


def test_flat_matches_per_ray():
    rng = np.random.default_rng(9)
    n_rays = 7
    counts = rng.integers(0, 9, n_rays)
    ray_id = np.repeat(np.arange(n_rays), counts)
    total = int(counts.sum())
    colors = rng.random((total, 3))
    sigma = rng.exponential(1.0, total)
    deltas = rng.uniform(0.01, 0.2, total)
    bg = (0.2, 0.4, 0.6)

    out, cache = composite_flat(ray_id, colors, sigma, deltas, n_rays, bg)
    up = rng.standard_normal((n_rays, 3))
    d_cols, d_dens = composite_flat_backward(cache, up)

    start = 0
    for r in range(n_rays):
        k = int(counts[r])
        ref = composite_ray(
            colors[start : start + k], sigma[start : start + k], deltas[start : start + k], bg
        )
        np.testing.assert_allclose(out[r], ref.color, rtol=1e-10, atol=1e-12)
        rd_cols, rd_dens = composite_backward(ref, up[r])
        np.testing.assert_allclose(
            d_cols[start : start + k], rd_cols, rtol=1e-9, atol=1e-12
        )
        np.testing.assert_allclose(
            d_dens[start : start + k], rd_dens, rtol=1e-8, atol=1e-11
        )
        start += k


def test_flat_empty_ray_is_background():
    out, _ = composite_flat(
        np.zeros(0, np.int64),
        np.zeros((0, 3)),
        np.zeros(0),
        np.zeros(0),
        3,
        (0.1, 0.2, 0.3),
    )
    np.testing.assert_allclose(out, np.tile([[0.1, 0.2, 0.3]], (3, 1)))


# ---------------------------------------------------------------------------
# loss


def test_loss_zero_at_match():
    pred = np.random.default_rng(0).random((5, 3))
    loss, grad = photometric_loss(pred, pred)
    assert loss == 0.0
    assert not grad.any()


def test_squared_loss_worked_example():
    pred = np.array([[0.6, 0.5, 0.5]])
    gt = np.array([[0.5, 0.5, 0.5]])
    loss, grad = photometric_loss(pred, gt, "squared")
    assert loss == pytest.approx(0.01, rel=1e-12)
    np.testing.assert_allclose(grad, [[0.2, 0.0, 0.0]], atol=1e-15)


def test_squared_loss_homogeneous():
    rng = np.random.default_rng(1)
    pred = rng.random((8, 3))
    gt = rng.random((8, 3))
    l1, _ = photometric_loss(pred, gt)
    l2, _ = photometric_loss(gt + 2 * (pred - gt), gt)
    assert l2 == pytest.approx(4 * l1, rel=1e-12)


def test_unsquared_loss_and_gradient():
    pred = np.array([[0.5, 0.5, 0.5], [0.8, 0.5, 0.5]])
    gt = np.array([[0.5, 0.5, 0.5], [0.5, 0.5, 0.5]])
    loss, grad = photometric_loss(pred, gt, "unsquared")
    assert loss == pytest.approx(0.3, rel=1e-12)
    np.testing.assert_allclose(grad[0], 0.0)  # zero-error ray has zero grad
    np.testing.assert_allclose(grad[1], [1.0, 0.0, 0.0], atol=1e-12)


def test_loss_rejects_mismatched_shapes():
    with pytest.raises(InvalidShapeError):
        photometric_loss(np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(InvalidInputError):
        photometric_loss(np.zeros((2, 3)), np.zeros((2, 3)), "other")


# ---------------------------------------------------------------------------
# metrics


def test_psnr_identity_capped():
    img = np.random.default_rng(2).random((16, 16, 3))
    assert psnr(img, img) == 99.0


def test_psnr_known_mse():
    a = np.zeros((10, 10))
    b = np.full((10, 10), 0.1)  # MSE 0.01
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)


def test_ssim_identity():
    img = np.random.default_rng(3).random((32, 32, 3))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_images_closed_form():
    c1, c2 = 0.25, 0.75
    a = np.full((24, 24), c1)
    b = np.full((24, 24), c2)
    k1 = 0.01**2
    want = (2 * c1 * c2 + k1) / (c1 * c1 + c2 * c2 + k1)
    assert ssim(a, b) == pytest.approx(want, rel=1e-9)


def test_ssim_inverted_image_is_low():
    rng = np.random.default_rng(4)
    # mid-contrast blobby test pattern
    x, y = np.meshgrid(np.linspace(0, 4 * np.pi, 64), np.linspace(0, 4 * np.pi, 64))
    img = 0.5 + 0.3 * np.sin(x) * np.cos(y) + 0.05 * rng.standard_normal((64, 64))
    img = np.clip(img, 0, 1)
    assert ssim(1.0 - img, img) < 0.1


def test_metrics_shape_mismatch():
    with pytest.raises(InvalidShapeError):
        image_metrics(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))


# ---------------------------------------------------------------------------
# occupancy refresh


def test_update_occupancy_zero_field():
    grid = make_occupancy_grid(4, 0.5)
    update_occupancy(grid, lambda pts: np.zeros(len(pts)))
    assert not grid.occupied.any()


def test_update_occupancy_marks_dense_region():
    grid = make_occupancy_grid(4, 0.5)

    def field(pts):
        # dense ball around (0.125, 0.125, 0.125), the center of cell 0,0,0
        d = np.linalg.norm(pts - 0.125, axis=1)
        return np.where(d < 0.1, 10.0, 0.0)

    update_occupancy(grid, field)
    assert grid.occupied[0, 0, 0]
    assert grid.occupied.sum() == 1


def test_threshold_default_scales_with_resolution():
    assert make_occupancy_grid(32).threshold == pytest.approx(0.32)
    assert make_occupancy_grid(32, 0.01).threshold == 0.01
    with pytest.raises(InvalidInputError):
        make_occupancy_grid(0)


def test_density_probe_zero_without_neighbors():
    cloud = make_cloud([[0.2, 0.2, 0.2]], [[0.1, 0.1, 0.1, 0.1]], s=0.05)
    index = build_index(cloud.positions, cloud.search_radius)
    params = init_field_params(4, seed=0)
    pts = np.array([[0.8, 0.8, 0.8], [0.2, 0.2, 0.2]])
    dens = density_probe(cloud, index, params, pts)
    assert dens[0] == 0.0
    assert dens[1] > 0.0


# ---------------------------------------------------------------------------
# full path


def sphere_cloud(rng, n=300, dtype=np.float32):
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pos = 0.5 + d * (0.15 * rng.random((n, 1)) ** (1 / 3))
    feats = 0.01 * rng.standard_normal((n, 4))
    return make_cloud(pos, feats, s=0.08, dtype=dtype)


def test_render_rays_shapes_and_determinism():
    rng = np.random.default_rng(0)
    cloud = sphere_cloud(rng)
    index = build_index(cloud.positions, cloud.search_radius)
    params = init_field_params(4, seed=0)
    o = np.tile(np.array([[0.5, 0.5, -0.5]], np.float32), (6, 1))
    d = np.tile(np.array([[0.0, 0.0, 1.0]], np.float32), (6, 1))
    cfg = RenderConfig(n_samples=32)
    a = render_rays(cloud, index, params, o, d, cfg)
    b = render_rays(cloud, index, params, o, d, cfg)
    assert a.colors.shape == (6, 3)
    assert a.colors.dtype == np.float32
    np.testing.assert_array_equal(a.colors, b.colors)


def test_ray_missing_all_particles_is_background():
    rng = np.random.default_rng(1)
    cloud = sphere_cloud(rng)
    index = build_index(cloud.positions, cloud.search_radius)
    params = init_field_params(4, seed=0)
    o = np.array([[0.02, 0.02, -0.5]], np.float32)  # grazes an empty corner
    d = np.array([[0.0, 0.0, 1.0]], np.float32)
    cfg = RenderConfig(n_samples=64, background=(0.25, 0.5, 0.75))
    res = render_rays(cloud, index, params, o, d, cfg)
    np.testing.assert_array_equal(
        res.colors[0], np.array([0.25, 0.5, 0.75], np.float32)
    )
    assert res.n_samples_kept == 0


def test_grads_flow_to_all_parameter_groups():
    rng = np.random.default_rng(2)
    cloud = sphere_cloud(rng)
    index = build_index(cloud.positions, cloud.search_radius)
    params = init_field_params(4, seed=0)
    o = np.tile(np.array([[0.5, 0.5, -0.5]], np.float32), (8, 1))
    jit = rng.random((8, 3)).astype(np.float32) * 0.02
    d = np.tile(np.array([[0.0, 0.0, 1.0]], np.float32), (8, 1)) + jit
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    cfg = RenderConfig(n_samples=48)
    gt = np.zeros((8, 3), np.float32)
    res = render_rays(cloud, index, params, o, d, cfg, gt=gt, want_grads=True)
    assert res.loss > 0
    assert any(np.abs(g).max() > 0 for g in res.field_grads.arrays())
    assert np.abs(res.encoding_grads.d_features).max() > 0
    assert np.abs(res.encoding_grads.d_positions).max() > 0


def test_end_to_end_position_gradient_matches_finite_difference():
    # double precision, no culling, so the loss is smooth in positions
    pos = np.array([[0.5, 0.5, 0.45], [0.54, 0.5, 0.55], [0.46, 0.48, 0.5]])
    feats = np.array(
        [[0.5, -0.2, 0.1, 0.3], [-0.4, 0.3, 0.2, -0.1], [0.2, 0.1, -0.3, 0.4]]
    )
    cloud = make_cloud(pos, feats, s=0.25, dtype=np.float64)
    params = init_field_params(4, seed=3, dtype=np.float64)
    o = np.array([[0.5, 0.5, -0.5], [0.45, 0.5, -0.5]])
    d = np.array([[0.0, 0.0, 1.0], [0.05, 0.0, 1.0]])
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    gt = np.array([[0.1, 0.2, 0.3], [0.9, 0.8, 0.7]])
    cfg = RenderConfig(n_samples=24, cull_empty=False)

    def loss_of(cloud):
        index = build_index(cloud.positions, cloud.search_radius)
        return render_rays(cloud, index, params, o, d, cfg, gt=gt).loss

    index = build_index(cloud.positions, cloud.search_radius)
    res = render_rays(cloud, index, params, o, d, cfg, gt=gt, want_grads=True)
    g = res.encoding_grads.d_positions

    h = 1e-5
    worst = 0.0
    for i in range(3):
        for a in range(3):
            orig = cloud.positions[i, a]
            cloud.positions[i, a] = orig + h
            lp = loss_of(cloud)
            cloud.positions[i, a] = orig - h
            lm = loss_of(cloud)
            cloud.positions[i, a] = orig
            fd = (lp - lm) / (2 * h)
            if max(abs(fd), abs(g[i, a])) > 1e-8:
                worst = max(worst, abs(g[i, a] - fd) / max(abs(fd), abs(g[i, a])))
    assert worst <= 1e-3


def test_render_view_deterministic_and_sized():
    rng = np.random.default_rng(4)
    cloud = sphere_cloud(rng)
    index = build_index(cloud.positions, cloud.search_radius)
    params = init_field_params(4, seed=1)
    pose = look_at([0.5, 0.5, 1.6], [0.5, 0.5, 0.5], up=(0.0, 1.0, 0.0))
    cam = Camera.from_angle_x(24, 18, 0.8, pose)
    cfg = RenderConfig(n_samples=24, seed=11)
    a = render_view(cloud, index, params, cam, cfg)
    b = render_view(cloud, index, params, cam, cfg)
    assert a.shape == (18, 24, 3)
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_render_view_empty_cloud_is_background():
    cloud = make_cloud(
        np.zeros((0, 3)), np.zeros((0, 4)), s=0.1, dtype=np.float32
    )
    index = build_index(cloud.positions, cloud.search_radius)
    params = init_field_params(4, seed=0)
    pose = look_at([0.5, 0.5, 1.6], [0.5, 0.5, 0.5], up=(0.0, 1.0, 0.0))
    cam = Camera.from_angle_x(8, 8, 0.8, pose)
    cfg = RenderConfig(n_samples=16, background=(1.0, 1.0, 1.0))
    img = render_view(cloud, index, params, cam, cfg)
    np.testing.assert_array_equal(img, 1.0)
