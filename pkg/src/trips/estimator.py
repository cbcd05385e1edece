"""scikit-learn style front end: ``fit`` optimizes a scene to photos, ``predict`` renders cameras."""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .io import MIN_IMAGE_SIZE
from .losses import psnr
from .pipeline import ModelConfig, SplatModel
from .scene import Camera, Frame, FrameSet, PointCloud, validate_scene
from .training import TrainSchedule, train


def check_cameras(X):
    """Return a list of :class:`Camera` from a camera list or a :class:`FrameSet`."""
    if isinstance(X, FrameSet):
        return X.cameras
    if isinstance(X, Camera):
        return [X]
    try:
        cams = list(X)
    except TypeError:
        raise TypeError(f"expected a sequence of Camera objects, got {type(X).__name__}") from None
    for i, c in enumerate(cams):
        if not isinstance(c, Camera):
            raise TypeError(f"X[{i}] is a {type(c).__name__}, expected Camera")
    if not cams:
        raise ValueError("X contains no cameras")
    for i, c in enumerate(cams):
        if min(c.width, c.height) < MIN_IMAGE_SIZE:
            raise ValueError(f"X[{i}] is {c.width}x{c.height}; images must be at least "
                             f"{MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}")
    return cams


def check_images(y, cameras):
    """Validate images against cameras; returns float32 (3, H, W) arrays in [0, 1]."""
    if isinstance(y, np.ndarray) and y.ndim == 4:
        y = list(y)
    y = list(y)
    if len(y) != len(cameras):
        raise ValueError(f"got {len(y)} images for {len(cameras)} cameras")
    out = []
    for i, (img, cam) in enumerate(zip(y, cameras)):
        img = np.asarray(img, dtype=np.float32)
        if img.ndim == 3 and img.shape[-1] == 3 and img.shape[0] != 3:
            img = img.transpose(2, 0, 1)
        if img.shape != (3, cam.height, cam.width):
            raise ValueError(f"image {i} has shape {img.shape}, camera needs (3, {cam.height}, {cam.width})")
        if not np.all(np.isfinite(img)):
            raise ValueError(f"image {i} contains non-finite values")
        if img.min() < 0 or img.max() > 1:
            raise ValueError(f"image {i} values must lie in [0, 1]")
        out.append(img)
    return out


def check_points(points, n_features, seed):
    if isinstance(points, PointCloud):
        if points.n_features != n_features:
            raise ValueError(f"point cloud has {points.n_features} features, estimator uses {n_features}")
        return points
    arr = np.asarray(points, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"points must be N x 3, got shape {arr.shape}")
    return PointCloud.from_positions(arr, n_features=n_features, rng=np.random.default_rng(seed))


class SplatRenderer(BaseEstimator):
    """Point-based neural renderer.

    ``fit(X, y, points=...)`` takes a sequence of cameras ``X``, matching images
    ``y`` of shape (n, 3, H, W) and an initial point cloud. Every eighth frame
    is held out for evaluation. ``predict(X)`` renders each camera and
    ``score(X, y)`` is the mean PSNR in dB.
    """

    def __init__(self, n_layers=4, n_features=4, use_sh=True, env_mode="constant", epochs=600,
                 warmup_epochs=20, ssim_weight=0.2, zoom_range=(0.5, 2.0), eval_every=10,
                 learning_rates=None, seed=0, threads=None):
        self.n_layers = n_layers
        self.n_features = n_features
        self.use_sh = use_sh
        self.env_mode = env_mode
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.ssim_weight = ssim_weight
        self.zoom_range = zoom_range
        self.eval_every = eval_every
        self.learning_rates = learning_rates
        self.seed = seed
        self.threads = threads

    def _config(self):
        return ModelConfig(n_layers=self.n_layers, n_features=self.n_features, use_sh=self.use_sh,
                           env_mode=self.env_mode)

    def fit(self, X, y, points=None):
        if points is None:
            raise ValueError("fit needs an initial point cloud (points=...)")
        from . import set_threads

        set_threads(self.threads)
        cams = check_cameras(X)
        images = check_images(y, cams)
        cloud = check_points(points, self.n_features, self.seed)
        frames = FrameSet([Frame(c, None, img) for c, img in zip(cams, images)])
        validate_scene(cloud, frames, near=self._config().near)
        rng = np.random.default_rng(self.seed)
        self.model_ = SplatModel.build(cloud, cams, self._config(), rng=rng,
                                       learning_rates=self.learning_rates)
        schedule = TrainSchedule(epochs=self.epochs, warmup_epochs=self.warmup_epochs,
                                 ssim_weight=self.ssim_weight, zoom_range=tuple(self.zoom_range),
                                 seed=self.seed, eval_every=self.eval_every)
        self.frames_ = frames
        self.metrics_ = train(self.model_, frames, schedule)
        self.n_points_ = self.model_.n_points
        return self

    def predict(self, X):
        """Render every camera; returns (n, 3, H, W) (a list when sizes differ)."""
        check_is_fitted(self, "model_")
        imgs = [self.model_.predict(camera=c) for c in check_cameras(X)]
        if len({im.shape for im in imgs}) == 1:
            return np.stack(imgs)
        return imgs

    def transform(self, X):
        """Rasterized feature pyramids (list of per-layer arrays) for each camera."""
        from .raster import rasterize_forward

        check_is_fitted(self, "model_")
        m = self.model_
        return [rasterize_forward(m.cloud(), c, m.config.raster, env=m.environment(),
                                  dtype=m.store.dtype)[0] for c in check_cameras(X)]

    def score(self, X, y):
        cams = check_cameras(X)
        images = check_images(y, cams)
        pred = self.predict(cams)
        vals = [psnr(p, t) for p, t in zip(pred, images)]
        return float(np.mean([v for v in vals if math.isfinite(v)] or [math.inf]))
