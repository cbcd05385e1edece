"""Finite-difference verification of the whole render pipeline (float64)."""
from __future__ import annotations

import math

import numpy as np

from .losses import total_loss
from .pipeline import ModelConfig, SplatModel, frame_key
from .raster import rasterize_forward
from .scene import Camera, PointCloud, look_at
from .shading import sh_shade, sh_shade_backward, tone_map, tone_map_backward
from .tensor import ParameterStore, finite_diff_check

KINK_MARGIN = 1e-3
FLOOR_RATIO = 1e-3


def random_scene(n_points=200, size=32, seed=0, n_layers=4, n_features=4, use_sh=True,
                 env_mode="constant"):
    """A random float64 model with two cameras and a random target image."""
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-0.5, 0.5, size=(n_points, 3))
    cloud = PointCloud.from_positions(pos, n_features=n_features, rng=rng, dtype=np.float64)
    cams = []
    for k in range(2):
        eye = 2.2 * np.array([math.cos(0.3 + k), math.sin(0.3 + k), 0.6])
        q, t = look_at(eye, rng.normal(0, 0.05, 3))
        cams.append(Camera(1.1 * size, 1.1 * size, size / 2 - 0.5, size / 2 - 0.5, size, size, q, t))
    config = ModelConfig(n_layers=n_layers, n_features=n_features, use_sh=use_sh, env_mode=env_mode)
    return prepare_model(cloud, cams, config, rng)


def prepare_model(cloud: PointCloud, cameras, config: ModelConfig, rng, target=None):
    """Float64 model with every parameter nudged off its neutral value.

    Returns ``(model, target)``; a random target is drawn when none is given.
    """
    cloud = PointCloud(np.asarray(cloud.positions, np.float64), np.asarray(cloud.log_sizes, np.float64),
                       rng.normal(0.0, 1.0, len(cloud)), np.asarray(cloud.descriptors, np.float64))
    model = SplatModel.build(cloud, cameras, config, rng=rng, dtype=np.float64)
    # nudge everything off its neutral value so no gradient vanishes by symmetry
    store = model.store
    store.value("env.values")[...] = rng.normal(0, 0.3, store.value("env.values").shape)
    store.value("tonemap.vignette")[...] = rng.normal(0, 0.05, 3)
    store.value("tonemap.response")[...] += rng.normal(0, 0.2, store.value("tonemap.response").shape)
    store.value(frame_key(0, "exposure"))[...] = 0.1
    store.value(frame_key(0, "wb"))[...] = [1.05, 0.95]
    # shrink output gains so tone-map clamps stay inactive
    store.value("decoder.out.w")[...] *= 0.5
    if target is None:
        cam = cameras[0]
        target = rng.uniform(0.2, 0.8, size=(3, cam.height, cam.width))
    return model, np.asarray(target, np.float64)


def pipeline_loss(model: SplatModel, frame, target, ssim_weight=0.2):
    def f(store, grad=True):
        image, cache = model.render(frame=frame)
        if not grad:
            return total_loss(image, target, ssim_weight=ssim_weight)
        loss, g = total_loss(image, target, ssim_weight=ssim_weight, return_grad=True)
        model.backward(cache, g)
        return loss
    return f


def kink_mask(saved, margin=KINK_MARGIN):
    """True for points of a rasterization whose splat or layer weights sit within ``margin`` of a kink."""
    cfg = saved.config
    x, y, s = saved.screen.T
    near = np.zeros(len(x), dtype=bool)
    ok = np.isfinite(x)
    for L in range(cfg.n_layers):
        scale = 2.0 ** L
        for c in ((x + 0.5) / scale - 0.5, (y + 0.5) / scale - 0.5):
            d = np.abs(c - np.round(c))
            near |= ok & (d < margin)
    ls = np.log2(np.where(ok, s, 1.0))
    near |= ok & (np.abs(ls - np.round(ls)) < margin)
    near |= ok & (np.abs(saved.view[:, 2] - cfg.near) < margin)
    return near


def point_kink_mask(model: SplatModel, frame, margin=KINK_MARGIN):
    cam = model.frame_camera(frame)
    _, saved = rasterize_forward(model.cloud(), cam, model.config.raster, env=model.environment(),
                                 dtype=np.float64)
    return kink_mask(saved, margin)


def _point_exclude(mask, width):
    return lambda i, step: bool(mask[i // width])


def run_gradcheck(model: SplatModel, target, frame=0, samples=60, h=1e-5, seed=0, groups=None):
    """Max relative error per parameter group; kinked point coordinates excluded."""
    store = model.store
    rng = np.random.default_rng(seed)
    mask = point_kink_mask(model, frame)
    f = pipeline_loss(model, frame, target)
    n_features = model.config.n_features
    plan = {
        "positions": [("points.positions", _point_exclude(mask, 3))],
        "log_sizes": [("points.log_sizes", _point_exclude(mask, 1))],
        # opacity and descriptors never move a splat, so a larger step is safe
        "opacity_logits": [("points.opacity_logits", _point_exclude(mask, 1), 1e-4)],
        "descriptors": [("points.descriptors", _point_exclude(mask, n_features), 1e-4)],
        # a pose step moves every point at once, so it needs a much smaller step
        "pose": [(frame_key(frame, "pose"), None, 1e-7)],
        "environment": [("env.values", None)],
        # the output layer shifts every pixel, like the tone-map parameters below
        "decoder": [(name, None, 1e-6 if name.startswith("decoder.out.") else h)
                    for name in store.names() if name.startswith("decoder.")],
        # global tone-map parameters move every pixel, so the step is kept small
        # enough that almost no pixel crosses a response knot
        "tonemap": [("tonemap.response", None, 1e-7), ("tonemap.vignette", None, 1e-7),
                    (frame_key(frame, "exposure"), None, 1e-7), (frame_key(frame, "wb"), None, 1e-7)],
    }
    store.zero_grad()
    f(store, grad=True)
    grad_max = {name: float(np.max(np.abs(store[name].grad))) for name in store.names()}
    store.zero_grad()
    results = {}
    for group, entries in plan.items():
        if groups is not None and group not in groups:
            continue
        # near-zero coordinates are judged against the largest gradient in the group
        floor = FLOOR_RATIO * max(grad_max[name] for name, *_ in entries)
        worst = 0.0
        for name, exclude, *step in entries:
            err = finite_diff_check(f, store, name, h=step[0] if step else h, samples=samples,
                                    rng=rng, exclude=exclude, floor=floor)
            worst = max(worst, err)
        results[group] = worst
    if groups is None or "sh_output" in groups:
        results["sh_output"] = sh_output_check(model, target, frame, samples, h, rng)
    return results


def sh_output_check(model: SplatModel, target, frame=0, samples=60, h=1e-5, rng=None):
    """Check shading + tone mapping + loss w.r.t. the decoder output tensor."""
    _, cache = model.render(frame=frame)
    cam = cache.camera
    params = model.tonemap_params(frame)
    radius = cam.radius_map()
    dirs, _ = cam.pixel_rays()
    out = cache.sh[0] if cache.sh is not None else cache.tonemap["hdr"]
    probe = ParameterStore(dtype=np.float64)
    probe.add("decoder.output", out, "network")

    def f(st, grad=True):
        x = st.value("decoder.output")
        if model.config.use_sh:
            rgb, basis = sh_shade(x, dirs)
        else:
            rgb, basis = x, None
        img, tc = tone_map(rgb, params, radius)
        if not grad:
            return total_loss(img, target)
        loss, g = total_loss(img, target, return_grad=True)
        g_rgb, _ = tone_map_backward(g, tc)
        g_out = sh_shade_backward(g_rgb, x, dirs, basis)[0] if basis is not None else g_rgb
        st.accumulate("decoder.output", g_out)
        return loss

    return finite_diff_check(f, probe, "decoder.output", h=h, samples=samples, rng=rng)
