import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reference_raster import random_scene, reference_rasterize, reference_select
from trips.raster import (Fragment, ProjectedPoint, RasterConfig, blend_pixel, layer_shapes,
                          project_point, rasterize_backward, rasterize_forward, screen_size,
                          select_layers, splat_point)
from trips.scene import Camera, PointCloud, look_at
from trips.tensor import ParameterStore, finite_diff_check


def cam100():
    return Camera(fx=100, fy=100, cx=50, cy=50, width=100, height=100)


# ---------------------------------------------------------------------------
# projection and size

def test_project_principal_ray():
    pp = project_point(cam100(), np.array([0.0, 0.0, 1.0]))
    assert (pp.x, pp.y, pp.z) == (50.0, 50.0, 1.0)


def test_project_culls_near_plane():
    assert project_point(cam100(), np.array([0.3, 0.1, 0.0])) is None
    assert project_point(cam100(), np.array([0.0, 0.0, -2.0])) is None


def test_project_culls_outside_footprint():
    assert project_point(cam100(), np.array([5.0, 0.0, 1.0])) is None
    # just beyond the right edge but the 2x2 footprint still overlaps the last column
    assert project_point(cam100(), np.array([0.497, 0.0, 1.0])) is not None


@given(seed=st.integers(0, 10_000))
def test_project_matches_homogeneous_matrix(seed):
    r = np.random.default_rng(seed)
    eye = r.normal(size=3) * 3
    q, t = look_at(eye, r.normal(size=3) * 0.1)
    cam = Camera(fx=r.uniform(50, 200), fy=r.uniform(50, 200), cx=r.uniform(30, 70),
                 cy=r.uniform(30, 70), width=100, height=100, q=q, t=t)
    x_w = r.normal(size=3) * 0.3
    K = np.array([[cam.fx, 0, cam.cx, 0], [0, cam.fy, cam.cy, 0], [0, 0, 1, 0]])
    M = np.eye(4)
    M[:3, :3] = cam.R
    M[:3, 3] = cam.t
    h = K @ M @ np.append(x_w, 1.0)
    pp = project_point(cam, x_w)
    if pp is None:
        return
    np.testing.assert_allclose([pp.x, pp.y, pp.z], [h[0] / h[2], h[1] / h[2], h[2]], rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("f,sw,z,s", [(1000, 0.01, 10, 1.0), (500, 0.02, 4, 2.5)])
def test_screen_size_examples(f, sw, z, s):
    assert screen_size(f, sw, z) == pytest.approx(s)


def test_screen_size_halves_with_depth():
    assert screen_size(300, 0.1, 6) == pytest.approx(screen_size(300, 0.1, 3) / 2)


def test_anisotropic_focal_is_geometric_mean():
    assert Camera(fx=100, fy=400, cx=0, cy=0, width=8, height=8).focal == pytest.approx(200)


# ---------------------------------------------------------------------------
# layer selection

def test_select_between_layers():
    sel = select_layers(3.0, 8)
    assert (sel.lo, sel.hi) == (1, 2)
    assert sel.iota_lo == pytest.approx(0.5) and sel.iota_hi == pytest.approx(0.5)


def test_select_exact_power_of_two():
    assert select_layers(4.0, 8) == (2, 2, 1.0, 0.0)


def test_select_small_point_floor():
    sel = select_layers(0.5, 8)
    assert (sel.lo, sel.hi) == (0, 0)
    assert sel.iota_lo == pytest.approx(0.625)


def test_select_clamps_large_sizes():
    assert select_layers(1000.0, 4) == (3, 3, 1.0, 0.0)
    assert select_layers(8.0, 4) == (3, 3, 1.0, 0.0)


def test_select_rejects_nonpositive():
    with pytest.raises(ValueError):
        select_layers(0.0, 4)


@given(s=st.floats(1e-3, 300.0), n=st.integers(3, 8))
def test_select_matches_reference_formula(s, n):
    sel = select_layers(s, n)
    ref = reference_select(s, n)
    assert sel.lo == ref[0][0] and sel.iota_lo == ref[0][1]
    if len(ref) == 2:
        assert sel.hi == ref[1][0] and sel.iota_hi == ref[1][1]


@given(s=st.floats(1.0, 127.999), n=st.integers(3, 8))
def test_select_weights_partition_unity(s, n):
    sel = select_layers(s, n)
    if s < 2.0 ** (n - 1):
        assert sel.iota_lo + sel.iota_hi == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("k", range(1, 7))
def test_select_continuous_at_powers_of_two(k):
    n = 8
    b = 2.0 ** k

    def weights(s):
        sel = select_layers(s, n)
        w = np.zeros(n)
        w[sel.lo] += sel.iota_lo
        w[sel.hi] += sel.iota_hi
        return w

    below, at, above = weights(b - 1e-4), weights(b), weights(b + 1e-4)
    assert np.max(np.abs(below - at)) < 1e-3
    assert np.max(np.abs(above - at)) < 1e-3
    assert at[k] == 1.0


# ---------------------------------------------------------------------------
# splatting

def test_splat_on_pixel_center():
    shapes = layer_shapes(64, 64, 4)
    sel = select_layers(1.0, 4)
    frags = splat_point(ProjectedPoint(10.0, 12.0, 1.0, 1.0, 0), 1.0, sel, shapes)
    betas = sorted(f.beta for f in frags)
    assert betas == [0.0, 0.0, 0.0, 1.0]
    hit = [f for f in frags if f.beta == 1.0][0]
    assert (hit.layer, hit.x, hit.y) == (0, 10, 12)


def test_splat_midpoint_four_quarters():
    shapes = layer_shapes(64, 64, 4)
    frags = splat_point(ProjectedPoint(10.5, 10.5, 1.0, 1.0, 0), 1.0, select_layers(1.0, 4), shapes)
    assert [f.beta for f in frags] == [0.25] * 4


def test_splat_drops_out_of_bounds():
    shapes = layer_shapes(16, 16, 3)
    frags = splat_point(ProjectedPoint(-0.5, 3.0, 1.0, 1.0, 0), 1.0, select_layers(1.0, 3), shapes)
    assert len(frags) == 2
    assert all(f.x == 0 for f in frags)


@given(x=st.floats(8.0, 54.0), y=st.floats(8.0, 54.0), s=st.floats(1.0, 7.99),
       a=st.floats(0.01, 0.99))
def test_weight_partition(x, y, s, a):
    shapes = layer_shapes(64, 64, 4)
    sel = select_layers(s, 4)
    frags = splat_point(ProjectedPoint(x, y, 1.0, s, 0), a, sel, shapes)
    assert len(frags) <= 8
    assert sum(f.weight for f in frags) == pytest.approx(a, abs=1e-6)
    for L in {sel.lo, sel.hi}:
        assert sum(f.beta for f in frags if f.layer == L) == pytest.approx(1.0, abs=1e-12)


def test_weight_partition_counts_dropped_pixels_through_kernel():
    """Summed kernel weights equal alpha for every in-range point inside the image."""
    rng = np.random.default_rng(3)
    cloud, cam = random_scene(rng, 2000)
    _, saved = rasterize_forward(cloud, cam, RasterConfig(n_layers=4), dtype=np.float64)
    s = saved.screen[:, 2]
    x, y = saved.screen[:, 0], saved.screen[:, 1]
    # points whose coarsest selected footprint is fully inside keep all fragments
    inside = (x > 8) & (y > 8) & (x < cam.width - 9) & (y < cam.height - 9)
    ok = (s >= 1) & (s < 8) & inside
    assert ok.sum() > 100
    np.testing.assert_allclose(saved.frag_w[ok].sum(axis=1), saved.alpha[ok], atol=1e-6)


# ---------------------------------------------------------------------------
# blending

def frag(z, w, i):
    return Fragment(z, w, i, 0, 0, 0, 1.0, 1.0)


def test_blend_two_halves():
    c, a = blend_pixel([frag(1, 0.5, 0), frag(2, 0.5, 1)], np.array([[1.0], [0.0]]), np.array([0.0]))
    assert c[0] == pytest.approx(0.5) and a == pytest.approx(0.75)


def test_blend_opaque_front_hides_background():
    c, a = blend_pixel([frag(1, 1.0, 0)], np.array([[0.3, 0.7]]), np.array([9.0, 9.0]))
    np.testing.assert_allclose(c, [0.3, 0.7])
    assert a == 1.0


@given(seed=st.integers(0, 10_000), n=st.integers(0, 30))
def test_blend_bounds(seed, n):
    r = np.random.default_rng(seed)
    desc = r.uniform(0, 1, (n, 3))
    frags = [frag(float(z), float(w), i) for i, (z, w) in enumerate(zip(np.sort(r.uniform(1, 2, n)),
                                                                        r.uniform(0, 1, n)))]
    c, a = blend_pixel(frags, desc, r.uniform(0, 1, 3))
    assert np.all(c >= 0) and np.all(c <= 1 + 1e-12)
    assert 0 <= a <= 1


def test_cap_keeps_sixteen_nearest():
    """30 fragments on one pixel: the kernel output equals compositing the 16 nearest."""
    rng = np.random.default_rng(0)
    n = 30
    z = rng.permutation(np.linspace(1.0, 2.0, n))
    cam = Camera(fx=10, fy=10, cx=4, cy=4, width=8, height=8)
    pos = np.column_stack([np.zeros(n), np.zeros(n), z])
    log_sizes = np.log(0.5 * z / cam.focal)  # s = 0.5: layer 0 only
    desc = rng.uniform(0, 1, (n, 2))
    cloud = PointCloud(pos, log_sizes, rng.normal(size=n), desc)
    pyr, saved = rasterize_forward(cloud, cam, RasterConfig(n_layers=3), dtype=np.float64)
    order = np.argsort(z)
    alpha = saved.alpha
    iota = 0.25 + 0.75 * 0.5
    frags_all = [frag(z[i], iota * alpha[i], i) for i in order]
    c16, a16 = blend_pixel(frags_all[:16], desc, np.zeros(2))
    c30, a30 = blend_pixel(frags_all, desc, np.zeros(2))
    np.testing.assert_allclose(pyr[0][:2, 4, 4], c16, rtol=1e-14)
    assert pyr[0][2, 4, 4] == pytest.approx(a16, rel=1e-14)
    assert a30 > a16  # the tail would have contributed
    assert saved.nsorted.max() == 16


# ---------------------------------------------------------------------------
# full forward

def test_empty_cloud_is_background():
    cloud = PointCloud(np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros((0, 4)))
    bg = np.array([0.1, 0.2, 0.3, 0.4])
    pyr, _ = rasterize_forward(cloud, cam100(), RasterConfig(n_layers=3), background=bg)
    for layer in pyr:
        np.testing.assert_allclose(layer[:4], np.broadcast_to(bg[:, None, None], layer[:4].shape), rtol=1e-6)
        assert np.all(layer[4] == 0)


def test_single_centered_point_touches_layer0_only():
    cam = Camera(fx=100, fy=100, cx=50, cy=50, width=100, height=100)
    cloud = PointCloud(np.array([[0.0, 0.0, 1.0]]), np.log([0.0099]), np.zeros(1), np.ones((1, 4)))
    pyr, _ = rasterize_forward(cloud, cam, RasterConfig(n_layers=4))
    nz = np.argwhere(pyr[0][4] > 0)
    assert len(nz) >= 1 and np.all(nz >= 49) and np.all(nz <= 51)
    for layer in pyr[1:]:
        assert np.all(layer[4] == 0)


def test_pyramid_shapes():
    cloud, cam = random_scene(np.random.default_rng(0), 10, width=37, height=21)
    pyr, _ = rasterize_forward(cloud, cam, RasterConfig(n_layers=5))
    assert [p.shape for p in pyr] == [(5, 21, 37), (5, 11, 19), (5, 6, 10), (5, 3, 5), (5, 2, 3)]


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("n_layers", [3, 6])
def test_forward_matches_reference(seed, n_layers):
    rng = np.random.default_rng(100 + seed)
    cloud, cam = random_scene(rng, 1000, dup_depth=True)
    bg = rng.uniform(0, 1, 4)
    pyr, _ = rasterize_forward(cloud, cam, RasterConfig(n_layers=n_layers), background=bg,
                               dtype=np.float64)
    ref = reference_rasterize(cloud, cam, n_layers, background=bg)
    for a, b in zip(pyr, ref):
        assert np.array_equal(a, b)


def test_saved_lists_sorted_and_capped():
    cloud, cam = random_scene(np.random.default_rng(7), 1500, dup_depth=True)
    _, saved = rasterize_forward(cloud, cam)
    depth = saved.view[:, 2]
    assert saved.nsorted.max() <= 16
    for p in np.flatnonzero(saved.nsorted > 1)[:500]:
        ids = saved.ids[p, :saved.nsorted[p]]
        keys = list(zip(depth[ids >> 3], ids))
        assert keys == sorted(keys)


def test_opacity_and_features_in_range():
    cloud, cam = random_scene(np.random.default_rng(9), 800)
    pyr, _ = rasterize_forward(cloud, cam, background=np.full(4, 0.5))
    for layer in pyr:
        assert layer.min() >= 0 and layer.max() <= 1 + 1e-6


def test_stage_timings_recorded():
    cloud, cam = random_scene(np.random.default_rng(1), 100)
    _, saved = rasterize_forward(cloud, cam)
    assert set(saved.timings) == {"count_alloc", "splat", "sort_blend"}
    assert all(v >= 0 for v in saved.timings.values())


# ---------------------------------------------------------------------------
# backward

def test_backward_zero_gradient():
    cloud, cam = random_scene(np.random.default_rng(2), 100)
    pyr, saved = rasterize_forward(cloud, cam, dtype=np.float64)
    g = rasterize_backward(saved, [np.zeros_like(p) for p in pyr])
    for arr in (g.positions, g.log_sizes, g.opacity_logits, g.descriptors, g.pose):
        assert np.all(arr == 0)


def test_backward_single_point_descriptor_grad_is_gamma():
    cam = Camera(fx=100, fy=100, cx=50, cy=50, width=100, height=100)
    cloud = PointCloud(np.array([[0.0, 0.0, 1.0]]), np.log([0.01]), np.array([0.3]), np.ones((1, 2)))
    pyr, saved = rasterize_forward(cloud, cam, RasterConfig(n_layers=3), dtype=np.float64)
    gp = [np.zeros_like(p) for p in pyr]
    gp[0][0, 50, 50] = 1.0
    g = rasterize_backward(saved, gp)
    gamma = 1.0 / (1.0 + math.exp(-0.3))  # centered, s = 1: beta = iota = 1
    assert g.descriptors[0, 0] == pytest.approx(gamma)
    assert g.descriptors[0, 1] == 0


def test_backward_rejects_mismatched_gradient():
    cloud, cam = random_scene(np.random.default_rng(2), 10)
    pyr, saved = rasterize_forward(cloud, cam)
    with pytest.raises(ValueError):
        rasterize_backward(saved, pyr[:-1])
    with pytest.raises(ValueError):
        rasterize_backward(saved, [p[:, :-1] for p in pyr])


def _raster_store(cloud):
    store = ParameterStore(dtype=np.float64)
    for name in ("positions", "log_sizes", "opacity_logits", "descriptors"):
        store.add(name, getattr(cloud, name), "network")
    store.add("pose", np.zeros(6), "network")
    return store


@pytest.mark.parametrize("entry", ["positions", "log_sizes", "opacity_logits", "descriptors", "pose"])
def test_backward_finite_differences(entry):
    from trips.gradcheck import kink_mask

    rng = np.random.default_rng(5)
    cloud, cam = random_scene(rng, 50, width=24, height=20)
    cloud.log_sizes = cloud.log_sizes - 0.3
    store = _raster_store(cloud)
    weights = None

    def f(s, grad=True):
        nonlocal weights
        pc = PointCloud(s.value("positions"), s.value("log_sizes"), s.value("opacity_logits"),
                        s.value("descriptors"))
        c = cam.compose(s.value("pose"))
        pyr, saved = rasterize_forward(pc, c, RasterConfig(n_layers=4), background=np.full(4, 0.3),
                                       dtype=np.float64)
        if weights is None:
            wr = np.random.default_rng(11)
            weights = [wr.normal(size=p.shape) for p in pyr]
        if grad:
            g = rasterize_backward(saved, weights)
            s.accumulate("positions", g.positions)
            s.accumulate("log_sizes", g.log_sizes)
            s.accumulate("opacity_logits", g.opacity_logits)
            s.accumulate("descriptors", g.descriptors)
            s.accumulate("pose", g.pose)
        return float(sum(np.sum(p * w) for p, w in zip(pyr, weights)))

    f(store, grad=False)
    _, saved = rasterize_forward(cloud, cam, RasterConfig(n_layers=4), dtype=np.float64)
    bad = kink_mask(saved, 1e-3)
    cols = store.value(entry).reshape(len(cloud), -1).shape[1] if entry != "pose" else 1

    def exclude(i, step):
        return entry != "pose" and bool(bad[i // cols])

    h = {"positions": 1e-5, "log_sizes": 1e-5, "pose": 1e-7}.get(entry, 1e-4)
    assert finite_diff_check(f, store, entry, h=h, exclude=exclude) < 1e-4
