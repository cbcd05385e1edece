"""End-to-end render function: rasterize -> decode -> SH shade -> tone map.

:class:`SplatModel` owns a :class:`~trips.tensor.ParameterStore` holding every
optimizable quantity and the per-frame base cameras; pose refinements are kept
as 6-vector tangents that are folded into the cameras after each step.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .decoder import Decoder, DecoderConfig
from .raster import RasterConfig, rasterize_backward, rasterize_forward
from .scene import Camera, EnvironmentMap, PointCloud, init_point_sizes
from .shading import ToneMapParams, IDENTITY_DELTA, N_KNOTS, sh_shade, sh_shade_backward, tone_map, tone_map_backward
from .tensor import ParameterStore

POINT_ENTRIES = {
    "positions": ("points.positions", "position"),
    "log_sizes": ("points.log_sizes", "size"),
    "opacity_logits": ("points.opacity_logits", "opacity"),
    "descriptors": ("points.descriptors", "features"),
}


@dataclass
class ModelConfig:
    n_layers: int = 4
    n_features: int = 4
    use_sh: bool = True
    env_mode: str = "constant"
    env_height: int = 16
    cap: int = 16
    eps: float = 0.25
    near: float = 0.01
    opacity_init: float = 0.5

    def __post_init__(self):
        if not 3 <= self.n_layers <= 8:
            raise ValueError(f"n_layers must be in [3, 8], got {self.n_layers}")
        if self.env_mode not in ("constant", "latlong"):
            raise ValueError(f"env_mode must be 'constant' or 'latlong', got {self.env_mode!r}")

    @property
    def raster(self):
        return RasterConfig(self.n_layers, self.cap, self.eps, self.near)

    @property
    def decoder(self):
        return DecoderConfig(self.n_layers, self.n_features, use_sh=self.use_sh)

    def to_dict(self):
        return asdict(self)


@dataclass
class RenderCache:
    camera: Camera
    frame: int | None
    raster: object
    decoder: object
    sh: tuple | None
    tonemap: dict
    timings: dict = field(default_factory=dict)


def frame_key(i, what):
    return f"frame{i}.{what}"


def _entry_order(name):
    # points, env, decoder, tonemap, then frames in numeric order
    head = name.split(".", 1)[0]
    if head.startswith("frame"):
        return (4, int(head[5:]), name)
    return ({"points": 0, "env": 1, "decoder": 2, "tonemap": 3}.get(head, 5), 0, name)


class SplatModel:
    def __init__(self, config: ModelConfig, store: ParameterStore, cameras):
        self.config = config
        self.store = store
        self.cameras = list(cameras)
        self.decoder = Decoder(config.decoder)
        self.epoch = 0

    # -- construction ------------------------------------------------------
    @classmethod
    def build(cls, cloud: PointCloud, cameras, config: ModelConfig | None = None, rng=None,
              learning_rates=None, init_sizes=True, dtype=np.float32):
        config = config or ModelConfig(n_features=cloud.n_features)
        if cloud.n_features != config.n_features:
            raise ValueError(f"cloud has {cloud.n_features} features, config expects {config.n_features}")
        rng = np.random.default_rng(0) if rng is None else rng
        cloud = cloud.copy()
        if init_sizes and len(cloud) >= 2:
            init_point_sizes(cloud)
        store = ParameterStore(learning_rates, dtype=dtype)
        store.learning_rates["position"] *= cloud.extent()
        for attr, (name, group) in POINT_ENTRIES.items():
            store.add(name, getattr(cloud, attr), group)
        if config.env_mode == "constant":
            env = EnvironmentMap.constant(config.n_features)
        else:
            env = EnvironmentMap.latlong(config.n_features, config.env_height)
        store.add("env.values", env.values, "environment")
        model = cls(config, store, cameras)
        model.decoder.init_params(store, rng)
        store.add("tonemap.response", np.full((3, N_KNOTS - 1), IDENTITY_DELTA), "tonemap")
        store.add("tonemap.vignette", np.zeros(3), "tonemap")
        for i, cam in enumerate(model.cameras):
            model._add_frame_params(i, cam)
        return model

    @classmethod
    def from_arrays(cls, config: ModelConfig, cameras, arrays, groups, learning_rates=None,
                    dtype=np.float32):
        """Rebuild a model from stored parameter arrays (see :mod:`trips.io`).

        ``learning_rates`` are taken as final; without them the defaults are used
        with the position rate scaled by the scene extent.
        """
        store = ParameterStore(learning_rates, dtype=dtype)
        if learning_rates is None:
            positions = np.asarray(arrays["points.positions"], np.float64)
            extent = float(max(np.ptp(positions, axis=0).max(), 1e-12)) if len(positions) else 1.0
            store.learning_rates["position"] *= extent
        for name in sorted(arrays, key=_entry_order):
            store.add(name, arrays[name], groups[name])
        return cls(config, store, cameras)

    def _add_frame_params(self, i, cam):
        self.store.add(frame_key(i, "exposure"), np.array([cam.exposure]), "exposure")
        self.store.add(frame_key(i, "wb"), np.array(cam.wb, dtype=np.float64), "exposure")
        self.store.add(frame_key(i, "pose"), np.zeros(6), "pose")

    # -- accessors -------------------------------------------------------------
    @property
    def n_points(self):
        return self.store.value("points.positions").shape[0]

    def cloud(self) -> PointCloud:
        v = self.store.value
        return PointCloud(*(v(POINT_ENTRIES[a][0]) for a in
                            ("positions", "log_sizes", "opacity_logits", "descriptors")))

    def environment(self) -> EnvironmentMap:
        return EnvironmentMap(self.config.env_mode, self.store.value("env.values"))

    def frame_camera(self, i) -> Camera:
        """Camera of frame ``i`` including its pending pose tangent."""
        cam = self.cameras[i]
        tangent = self.store.value(frame_key(i, "pose")).astype(np.float64)
        return cam.compose(tangent) if np.any(tangent) else cam

    def tonemap_params(self, frame=None, camera=None):
        v = self.store.value
        if frame is not None:
            exposure = float(v(frame_key(frame, "exposure"))[0])
            wb = v(frame_key(frame, "wb")).astype(np.float64)
        elif camera is not None:
            exposure, wb = camera.exposure, np.asarray(camera.wb, np.float64)
        else:
            exposure, wb = 0.0, np.ones(2)
        return ToneMapParams(exposure, wb, v("tonemap.response").astype(np.float64),
                             v("tonemap.vignette").astype(np.float64))

    def apply_pose_updates(self):
        """Fold pending pose tangents into the cameras and reset them to zero."""
        for i in range(len(self.cameras)):
            p = self.store[frame_key(i, "pose")]
            if np.any(p.value):
                self.cameras[i] = self.cameras[i].compose(p.value.astype(np.float64))
                p.value[...] = 0

    # -- render ------------------------------------------------------------------
    def render(self, camera: Camera | None = None, frame=None, view=None):
        """Render a frame (``frame`` index) or an arbitrary ``camera``.

        ``view`` maps the frame camera to the rendered viewport (zoom/crop).
        Returns ``(image, cache)`` with ``image`` of shape (3, H, W).
        """
        if camera is None:
            if frame is None:
                raise ValueError("need a camera or a frame index")
            camera = self.frame_camera(frame)
        if view is not None:
            camera = view(camera)
        dtype = self.store.dtype
        t0 = time.perf_counter()
        pyramid, rsaved = rasterize_forward(self.cloud(), camera, self.config.raster,
                                            env=self.environment(), dtype=dtype)
        t1 = time.perf_counter()
        out, dcache = self.decoder.forward(self.store, pyramid)
        t2 = time.perf_counter()
        if self.config.use_sh:
            dirs, cam_dirs = camera.pixel_rays()
            rgb, basis = sh_shade(out, dirs.astype(dtype))
            sh = (out, dirs, cam_dirs, basis)
        else:
            rgb, sh = out, None
        params = self.tonemap_params(frame, camera)
        image, tcache = tone_map(rgb, params, camera.radius_map())
        t3 = time.perf_counter()
        timings = dict(rsaved.timings)
        timings.update(ms_raster=(t1 - t0) * 1e3, ms_net=(t2 - t1) * 1e3, ms_tonemap=(t3 - t2) * 1e3)
        return image, RenderCache(camera, frame, rsaved, dcache, sh, tcache, timings)

    def backward(self, cache: RenderCache, grad_image):
        """Accumulate d loss / d parameters into the store."""
        store = self.store
        dtype = store.dtype
        g_rgb, tg = tone_map_backward(grad_image, cache.tonemap)
        store.accumulate("tonemap.response", tg["response"])
        store.accumulate("tonemap.vignette", tg["vignette"])
        frame = cache.frame
        if frame is not None:
            store.accumulate(frame_key(frame, "exposure"), np.array([tg["exposure"]]))
            store.accumulate(frame_key(frame, "wb"), tg["wb"])
        pose_grad = np.zeros(6)
        if cache.sh is not None:
            out, dirs, cam_dirs, basis = cache.sh
            g_out, g_dirs = sh_shade_backward(g_rgb.astype(dtype), out, dirs, basis)
            # d world_dir = -R^T (omega x n) for a left rotation increment
            Rg = np.einsum("ij,jhw->ihw", cache.camera.R, g_dirs.astype(np.float64))
            pose_grad[:3] += np.cross(Rg, cam_dirs, axis=0).sum(axis=(1, 2))
        else:
            g_out = g_rgb
        grad_pyramid = self.decoder.backward(store, cache.decoder, np.asarray(g_out, dtype))
        rg = rasterize_backward(cache.raster, grad_pyramid)
        store.accumulate("points.positions", rg.positions)
        store.accumulate("points.log_sizes", rg.log_sizes)
        store.accumulate("points.opacity_logits", rg.opacity_logits)
        store.accumulate("points.descriptors", rg.descriptors)
        store.accumulate("env.values", rg.environment)
        if frame is not None:
            store.accumulate(frame_key(frame, "pose"), pose_grad + rg.pose)
        return pose_grad + rg.pose

    def predict(self, camera: Camera | None = None, frame=None):
        image, _ = self.render(camera=camera, frame=frame)
        return image
