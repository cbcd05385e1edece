"""Optimization loop: warm-up, zoom augmentation, Adam per frame, evaluation and recovery."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass

import numpy as np

from .losses import psnr, ssim, total_loss
from .pipeline import SplatModel, frame_key
from .scene import Camera, FrameSet
from .tensor import NonFiniteGradientError, adam_step

logger = logging.getLogger(__name__)

STAGES = ("ms_raster", "ms_net", "ms_tonemap")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainSchedule:
    epochs: int = 600
    warmup_epochs: int = 20
    warmup_scale: float = 0.5
    ssim_weight: float = 0.2
    zoom_range: tuple = (0.5, 2.0)
    seed: int = 0
    eval_every: int = 10
    grad_clip: float = 10.0
    groups: tuple | None = None  # enabled learning-rate groups, None = all

    def __post_init__(self):
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.epochs and self.warmup_epochs >= self.epochs:
            raise ValueError(f"warm-up ({self.warmup_epochs}) must be shorter than training ({self.epochs})")
        if not 0.0 <= self.ssim_weight <= 1.0:
            raise ValueError(f"ssim_weight must be in [0, 1], got {self.ssim_weight}")
        lo, hi = self.zoom_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid zoom range {self.zoom_range}")


class MetricsRecord:
    """Per-epoch metrics; rows must be appended in increasing epoch order."""

    def __init__(self):
        self.rows = []

    def append(self, epoch, loss=math.nan, psnr=math.nan, ssim=math.nan, **timings):
        if self.rows and epoch <= self.rows[-1]["epoch"]:
            raise ValueError(f"epoch {epoch} appended after epoch {self.rows[-1]['epoch']}")
        row = {"epoch": int(epoch), "loss": float(loss), "psnr": float(psnr), "ssim": float(ssim)}
        for k in STAGES:
            row[k] = float(timings.get(k, math.nan))
        self.rows.append(row)
        return row

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, i):
        return self.rows[i]

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    def last_eval(self):
        for r in reversed(self.rows):
            if not math.isnan(r["psnr"]):
                return r
        return None

    def to_csv(self, path):
        from .io import write_metrics_csv

        write_metrics_csv(path, self.rows)


# ---------------------------------------------------------------------------
# resampling and views

def resample_matrix(n_out, n_in, zoom, offset=0):
    """Linear interpolation from ``n_in`` samples to a grid zoomed by ``zoom``.

    Output sample ``j`` sits at input coordinate ``(j + offset + 0.5) / zoom - 0.5``.
    When shrinking, the tent widens to ``1 / zoom`` input pixels so every input
    pixel contributes. Rows sum to one; the edges clamp.
    """
    support = max(1.0, 1.0 / zoom)
    centers = (np.arange(n_out) + offset + 0.5) / zoom - 0.5
    idx = np.arange(n_in)
    w = np.maximum(0.0, 1.0 - np.abs(idx[None, :] - centers[:, None]) / support)
    empty = w.sum(axis=1) == 0
    if np.any(empty):
        nearest = np.clip(np.round(centers[empty]).astype(np.int64), 0, n_in - 1)
        w[np.flatnonzero(empty), nearest] = 1.0
    # clamp: outside samples reuse the border pixel
    for j in np.flatnonzero((centers < 0) | (centers > n_in - 1)):
        if not empty[j]:
            edge = 0 if centers[j] < 0 else n_in - 1
            w[j] = 0.0
            w[j, edge] = 1.0
    return w / w.sum(axis=1, keepdims=True)


def resample_image(img, zoom_x, zoom_y, out_w, out_h, x0=0, y0=0):
    """Resample (C, H, W) onto the pixel grid of the zoomed camera, cropped at (x0, y0)."""
    img = np.asarray(img, np.float64)
    my = resample_matrix(out_h, img.shape[1], zoom_y, y0)
    mx = resample_matrix(out_w, img.shape[2], zoom_x, x0)
    return np.matmul(np.matmul(my, img), mx.T)


@dataclass
class View:
    """Zoom factor plus crop applied to a frame camera."""
    zoom: float
    x0: int
    y0: int
    width: int
    height: int

    def camera(self, cam: Camera) -> Camera:
        return cam.scaled(self.zoom_x(cam), self.zoom_y(cam)).cropped(self.x0, self.y0, self.width, self.height)

    def zoom_x(self, cam):
        return round(cam.width * self.zoom) / cam.width

    def zoom_y(self, cam):
        return round(cam.height * self.zoom) / cam.height

    def target(self, cam: Camera, image):
        return resample_image(image, self.zoom_x(cam), self.zoom_y(cam), self.width, self.height,
                              self.x0, self.y0)


def sample_view(cam: Camera, zoom, rng):
    """Zoom ``cam`` and crop to at most its own size; crop offsets are biased toward the center."""
    w = int(round(cam.width * zoom))
    h = int(round(cam.height * zoom))
    cw, ch = min(w, cam.width), min(h, cam.height)
    x0 = int(round((w - cw) * rng.beta(2.0, 2.0)))
    y0 = int(round((h - ch) * rng.beta(2.0, 2.0)))
    return View(zoom, x0, y0, cw, ch)


# ---------------------------------------------------------------------------
# training

def _snapshot(model: SplatModel):
    params = {p.name: (p.value.copy(), p.m.copy(), p.v.copy(), p.step) for p in model.store}
    return params, copy.deepcopy(model.cameras)


def _restore(model: SplatModel, snap):
    params, cams = snap
    for p in model.store:
        v, m, s, step = params[p.name]
        p.value[...] = v
        p.m[...] = m
        p.v[...] = s
        p.step = step
    model.store.zero_grad()
    model.cameras = copy.deepcopy(cams)


def _clip_gradients(store, max_norm):
    norm = store.global_grad_norm()
    if max_norm and math.isfinite(norm) and norm > max_norm:
        scale = max_norm / norm
        for p in store:
            if p.enabled and p.touched:
                p.grad *= scale
    return norm


def _set_eval_photometrics(model: SplatModel, frames: FrameSet, train_idx):
    """Held-out frames take the mean exposure and white balance of the training frames."""
    if len(train_idx) == 0:
        return
    store = model.store
    ev = np.mean([store.value(frame_key(i, "exposure")) for i in train_idx], axis=0)
    wb = np.mean([store.value(frame_key(i, "wb")) for i in train_idx], axis=0)
    for i in frames.test_indices:
        store.value(frame_key(i, "exposure"))[...] = ev
        store.value(frame_key(i, "wb"))[...] = wb


def evaluate(model: SplatModel, frames: FrameSet, indices=None, mask_fn=None):
    """Mean PSNR and SSIM over ``indices`` (default: held-out frames) at full resolution.

    ``mask_fn(camera) -> (H, W) bool`` restricts PSNR to a pixel subset.
    """
    indices = frames.test_indices if indices is None else indices
    ps, ss = [], []
    for i in indices:
        img = model.predict(frame=i)
        gt = frames[i].image
        if mask_fn is not None:
            m = mask_fn(model.frame_camera(i))
            if not m.any():
                continue
            ps.append(psnr(img[:, m], gt[:, m]))
        else:
            ps.append(psnr(img, gt))
            ss.append(ssim(img, gt))
    return (float(np.mean(ps)) if ps else math.nan, float(np.mean(ss)) if ss else math.nan)


def train(model: SplatModel, frames: FrameSet, schedule: TrainSchedule | None = None,
          callback=None, log_every=10):
    """Optimize ``model`` against the images in ``frames``; returns a :class:`MetricsRecord`.

    Each epoch visits the training frames in random order with one Adam step
    per frame. Warm-up epochs render at reduced resolution; later epochs draw
    a log-uniform zoom and a center-biased crop. A non-finite gradient aborts
    the epoch, restores the state from its start and halves all learning rates
    (a second occurrence is fatal).
    """
    schedule = schedule or TrainSchedule()
    if len(model.cameras) != len(frames):
        raise ValueError(f"model has {len(model.cameras)} cameras, frame set has {len(frames)}")
    for i, fr in enumerate(frames.frames):
        if fr.image is None:
            raise ValueError(f"frame {i} has no image")
    store = model.store
    enabled_before = {p.name: p.enabled for p in store}
    if schedule.groups is not None:
        store.only(schedule.groups)
    rng = np.random.default_rng(schedule.seed)
    record = MetricsRecord()
    train_idx = frames.train_indices
    any_enabled = any(p.enabled for p in store)
    lr_scale = 1.0
    halved = False
    start = model.epoch
    epoch = start
    zlo, zhi = schedule.zoom_range
    while epoch < start + schedule.epochs:
        local = epoch - start
        snap = _snapshot(model)
        order = rng.permutation(train_idx)
        losses = []
        stage = {k: 0.0 for k in STAGES}
        aborted = False
        for i in order:
            cam = model.frame_camera(i)
            if local < schedule.warmup_epochs:
                view = View(schedule.warmup_scale, 0, 0,
                            int(round(cam.width * schedule.warmup_scale)),
                            int(round(cam.height * schedule.warmup_scale)))
            else:
                zoom = math.exp(rng.uniform(math.log(zlo), math.log(zhi)))
                view = sample_view(cam, zoom, rng)
            if not any_enabled:
                continue
            target = view.target(cam, frames[i].image)
            image, cache = model.render(frame=i, view=view.camera)
            loss, grad = total_loss(image, target, ssim_weight=schedule.ssim_weight, return_grad=True)
            if not math.isfinite(loss):
                aborted = True
                break
            model.backward(cache, grad)
            _clip_gradients(store, schedule.grad_clip)
            try:
                adam_step(store, lr_scale=lr_scale)
            except NonFiniteGradientError as exc:
                logger.warning("epoch %d: %s", epoch, exc)
                aborted = True
                break
            model.apply_pose_updates()
            losses.append(loss)
            for k in STAGES:
                stage[k] += cache.timings[k]
        if aborted:
            if halved:
                raise TrainingError(f"non-finite loss or gradient again in epoch {epoch}")
            _restore(model, snap)
            lr_scale *= 0.5
            halved = True
            logger.warning("epoch %d aborted; state restored, learning rates halved", epoch)
            continue
        epoch += 1
        model.epoch = epoch
        n = max(len(losses), 1)
        row = {"loss": float(np.mean(losses)) if losses else math.nan}
        row.update({k: v / n for k, v in stage.items()})
        last = local + 1 == schedule.epochs
        if schedule.eval_every and (epoch % schedule.eval_every == 0 or last) and len(frames.test_indices):
            _set_eval_photometrics(model, frames, train_idx)
            row["psnr"], row["ssim"] = evaluate(model, frames)
        record.append(epoch, **row)
        if log_every and (epoch % log_every == 0 or last):
            logger.info("epoch %d loss %.5f psnr %.2f", epoch, row["loss"], row.get("psnr", math.nan))
        if callback is not None:
            callback(model, record)
    for p in store:
        p.enabled = enabled_before[p.name]
    return record


def refit_positions(model: SplatModel, frames: FrameSet, sigma=0.01, epochs=100, seed=0,
                    optimize_positions=True, schedule: TrainSchedule | None = None):
    """Perturb every position by N(0, sigma^2) and re-optimize positions only.

    With ``optimize_positions=False`` nothing is optimized (the control run).
    Returns a :class:`MetricsRecord` whose first row (epoch of the model before
    the perturbation) holds the evaluation right after adding the noise.
    """
    rng = np.random.default_rng(seed)
    pos = model.store.value("points.positions")
    if sigma > 0:
        pos += rng.normal(0.0, sigma, pos.shape).astype(pos.dtype)
    base = schedule or TrainSchedule()
    sched = TrainSchedule(epochs=epochs, warmup_epochs=0, ssim_weight=base.ssim_weight,
                          zoom_range=base.zoom_range, seed=seed, eval_every=base.eval_every,
                          grad_clip=base.grad_clip,
                          groups=("position",) if optimize_positions else ())
    record = MetricsRecord()
    p0, s0 = evaluate(model, frames)
    record.append(model.epoch, psnr=p0, ssim=s0)
    if epochs:
        for row in train(model, frames, sched).rows:
            record.append(**row)
    return record
