"""Synthetic scenes with exact, analytically ray-traced ground truth.

Ground truth never touches :mod:`trips.raster`: each pixel is supersampled by
intersecting camera rays with the analytic surface and evaluating its texture.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene import Camera, Frame, FrameSet, PointCloud, look_at

KINDS = ("plane", "sphere", "hole")

PLANE_HALF = 0.5
SPHERE_RADIUS = 0.5
HOLE_RADIUS = 0.15
HOLE_TEXEL = 0.4  # one checker cell of this size is centred on the hole
BACKGROUND = np.array([0.1, 0.1, 0.12])
CHECKER_A = np.array([0.85, 0.55, 0.25])
CHECKER_B = np.array([0.2, 0.45, 0.7])
LIGHT = np.array([0.4, -0.5, 0.77]) / np.linalg.norm([0.4, -0.5, 0.77])
SUPERSAMPLE = 4


@dataclass
class RingParams:
    radius: float
    height: float
    focal_scale: float
    target: tuple = (0.0, 0.0, 0.0)


@dataclass
class SyntheticScene:
    kind: str
    cloud: PointCloud
    frames: FrameSet
    colors: np.ndarray
    ring: RingParams
    texel: float
    meta: dict = field(default_factory=dict)

    @property
    def images(self):
        return [f.image for f in self.frames.frames]


# ---------------------------------------------------------------------------
# textures

def checker_color(x, y, texel, centered=False):
    """Two-tone checkerboard on the plane z = 0 (last axis of the result is RGB).

    ``centered`` shifts the board by half a cell so that one cell is centred on the origin.
    """
    shift = 0.5 if centered else 0.0
    parity = (np.floor(x / texel + shift) + np.floor(y / texel + shift)).astype(np.int64) & 1
    return np.where(parity[..., None] == 0, CHECKER_A, CHECKER_B)


def sphere_color(n):
    """Smooth albedo bands on the unit normal ``n`` (..., 3) with a fixed diffuse light."""
    theta = np.arctan2(n[..., 1], n[..., 0])
    albedo = np.stack([
        0.55 + 0.35 * np.cos(3 * theta),
        0.5 + 0.3 * np.sin(4 * n[..., 2] * math.pi / 2),
        0.5 + 0.3 * np.cos(theta + 2 * n[..., 2]),
    ], axis=-1)
    light = 0.35 + 0.65 * np.clip(n @ LIGHT, 0.0, None)
    return np.clip(albedo * light[..., None], 0.0, 1.0)


# ---------------------------------------------------------------------------
# point sampling

def _plane_points(n, rng, hole):
    side = int(math.ceil(math.sqrt(n)))
    cell = 2 * PLANE_HALF / side
    gy, gx = np.divmod(np.arange(side * side), side)
    pts = np.stack([(gx + rng.random(side * side)) * cell - PLANE_HALF,
                    (gy + rng.random(side * side)) * cell - PLANE_HALF], axis=1)
    pts = pts[rng.permutation(len(pts))[:n]]
    if hole:
        pts = pts[np.hypot(pts[:, 0], pts[:, 1]) >= HOLE_RADIUS]
    return np.concatenate([pts, np.zeros((len(pts), 1))], axis=1)


def _sphere_points(n, rng):
    # jittered Fibonacci lattice
    i = np.arange(n) + rng.uniform(-0.4, 0.4, n)
    i = np.clip(i, 0, n - 1) + 0.5
    z = 1 - 2 * i / n
    phi = math.pi * (3 - math.sqrt(5)) * np.arange(n)
    r = np.sqrt(np.clip(1 - z * z, 0, 1))
    return SPHERE_RADIUS * np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def mean_spacing(kind, n_points):
    area = 4 * math.pi * SPHERE_RADIUS ** 2 if kind == "sphere" else (2 * PLANE_HALF) ** 2
    return math.sqrt(area / n_points)


# ---------------------------------------------------------------------------
# analytic ray tracing

def _shade_rays(kind, origin, dirs, texel):
    """RGB for rays ``origin + s * dirs`` (dirs: (..., 3))."""
    out = np.broadcast_to(BACKGROUND, dirs.shape).copy()
    if kind in ("plane", "hole"):
        dz = dirs[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = -origin[2] / dz
        hit = np.isfinite(s) & (s > 0)
        x = origin[0] + s * dirs[..., 0]
        y = origin[1] + s * dirs[..., 1]
        hit &= (np.abs(x) <= PLANE_HALF) & (np.abs(y) <= PLANE_HALF)
        out[hit] = checker_color(x[hit], y[hit], texel, centered=kind == "hole")
    else:
        b = dirs @ origin
        c = origin @ origin - SPHERE_RADIUS ** 2
        disc = b * b - c
        hit = disc >= 0
        s = -b - np.sqrt(np.where(hit, disc, 0.0))
        hit &= s > 0
        p = origin + s[..., None] * dirs
        out[hit] = sphere_color(p[hit] / SPHERE_RADIUS)
    return out


def render_ground_truth(kind, camera: Camera, texel, supersample=SUPERSAMPLE):
    """Box-filtered analytic image (3, H, W) with ``supersample**2`` rays per pixel."""
    R = camera.R
    origin = camera.center
    acc = np.zeros((camera.height, camera.width, 3))
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    u = np.arange(camera.width, dtype=np.float64)
    v = np.arange(camera.height, dtype=np.float64)
    for oy in offs:
        for ox in offs:
            dx = (u + ox - camera.cx) / camera.fx
            dy = (v + oy - camera.cy) / camera.fy
            d = np.empty((camera.height, camera.width, 3))
            d[..., 0] = dx[None, :]
            d[..., 1] = dy[:, None]
            d[..., 2] = 1.0
            d /= np.linalg.norm(d, axis=-1, keepdims=True)
            acc += _shade_rays(kind, origin, d @ R, texel)
    return (acc / supersample ** 2).transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# scenes

def ring_cameras(n_cameras, resolution, ring: RingParams, rng=None):
    cams = []
    f = ring.focal_scale * resolution
    c = resolution / 2 - 0.5
    for k in range(n_cameras):
        a = 2 * math.pi * k / n_cameras
        eye = np.array([ring.radius * math.cos(a), ring.radius * math.sin(a), ring.height])
        q, t = look_at(eye, np.asarray(ring.target, dtype=np.float64))
        cams.append(Camera(f, f, c, c, resolution, resolution, q, t))
    return cams


def default_ring(kind):
    if kind == "sphere":
        return RingParams(radius=1.6, height=0.5, focal_scale=1.1)
    return RingParams(radius=0.85, height=0.9, focal_scale=0.95)


def make_synthetic_scene(kind="plane", n_points=10_000, n_cameras=16, resolution=128, seed=0,
                         n_features=4, texel=None, supersample=SUPERSAMPLE):
    """Point cloud, cameras and analytic ground-truth images for a test scene.

    ``plane`` is a checkerboard quad, ``sphere`` a shaded shell and ``hole`` the
    plane with a disc of points removed (its ground truth still shows the
    surface). The checker texel defaults to four mean point spacings; the hole
    scene instead sits in the middle of one large cell so that the missing
    surface is predictable from the points around it.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    if n_points < 100:
        raise ValueError(f"need at least 100 points, got {n_points}")
    if n_cameras < 9:
        raise ValueError(f"need at least 9 cameras for a held-out frame, got {n_cameras}")
    rng = np.random.default_rng(seed)
    if texel is None:
        texel = HOLE_TEXEL if kind == "hole" else 4 * mean_spacing(kind, n_points)
    if kind == "sphere":
        pos = _sphere_points(n_points, rng)
        colors = sphere_color(pos / SPHERE_RADIUS)
    else:
        pos = _plane_points(n_points, rng, hole=kind == "hole")
        colors = checker_color(pos[:, 0], pos[:, 1], texel, centered=kind == "hole")
    cloud = PointCloud.from_positions(pos.astype(np.float32), n_features=n_features,
                                      colors=colors, rng=rng)
    ring = default_ring(kind)
    frames = []
    for i, cam in enumerate(ring_cameras(n_cameras, resolution, ring)):
        img = render_ground_truth(kind, cam, texel, supersample).astype(np.float32)
        frames.append(Frame(cam, f"{i:04d}.png", img))
    return SyntheticScene(kind, cloud, FrameSet(frames), colors, ring, texel,
                          meta={"seed": seed, "n_points": n_points, "resolution": resolution})


def hole_mask(camera: Camera, radius=HOLE_RADIUS):
    """Pixels whose central ray hits the plane inside the hole disc, (H, W) bool."""
    u = np.arange(camera.width, dtype=np.float64)
    v = np.arange(camera.height, dtype=np.float64)
    d = np.empty((camera.height, camera.width, 3))
    d[..., 0] = ((u - camera.cx) / camera.fx)[None, :]
    d[..., 1] = ((v - camera.cy) / camera.fy)[:, None]
    d[..., 2] = 1.0
    d = d @ camera.R
    o = camera.center
    with np.errstate(divide="ignore", invalid="ignore"):
        s = -o[2] / d[..., 2]
    x = o[0] + s * d[..., 0]
    y = o[1] + s * d[..., 1]
    return np.isfinite(s) & (s > 0) & (np.hypot(x, y) < radius)


def write_scene(directory, scene: SyntheticScene):
    """Write ``points.ply``, ``cameras.json`` and PNG ground truth into ``directory``."""
    from .io import write_cameras, write_image, write_ply

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ply(d / "points.ply", scene.cloud.positions, colors=scene.colors)
    for fr in scene.frames.frames:
        write_image(d / fr.image_path, fr.image)
    write_cameras(d / "cameras.json", scene.frames)
    (d / "scene.json").write_text(json.dumps({"kind": scene.kind, "texel": scene.texel, **scene.meta}))
    return d
