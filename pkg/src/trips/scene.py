"""Scene containers: point cloud, cameras, environment, frame sets."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

logger = logging.getLogger(__name__)

TEST_EVERY = 8


class SceneError(ValueError):
    """Fatal problem with scene data."""


# ---------------------------------------------------------------------------
# rotations

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0:
        raise SceneError(f"degenerate quaternion {q}")
    # unit to within rounding: keep as is so re-normalizing is idempotent
    if abs(n - 1.0) > 4e-16:
        q = q / n
    return q if q[0] >= 0 else -q


def quat_to_rotation(q):
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def axis_angle_to_quat(omega):
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    if theta < 1e-12:
        return quat_normalize(np.array([1.0, *(0.5 * omega)]))
    axis = omega / theta
    return np.array([math.cos(theta / 2), *(math.sin(theta / 2) * axis)])


def rotation_to_quat(R):
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def quat_slerp(a, b, u):
    a, b = quat_normalize(a), quat_normalize(b)
    d = float(np.dot(a, b))
    if d < 0:
        b, d = -b, -d
    if d > 0.9995:
        return quat_normalize(a + u * (b - a))
    theta = math.acos(min(d, 1.0))
    s = math.sin(theta)
    return quat_normalize((math.sin((1 - u) * theta) * a + math.sin(u * theta) * b) / s)


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World->view pose (q, t) for a camera at ``eye`` looking at ``target``.

    View convention: right-handed, +z forward, +y down, +x right.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return rotation_to_quat(R), -R @ eye


# ---------------------------------------------------------------------------
# containers

@dataclass
class Camera:
    """Pinhole camera. Pixel centers sit at integer coordinates.

    ``q``/``t`` map world to view coordinates: ``p = R(q) @ x + t``.
    ``vignette_ref`` is the normalized-image-plane radius that maps to r = 1 in
    the vignetting polynomial; derived (zoomed/cropped) cameras keep the value of
    the camera they came from.
    """
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    exposure: float = 0.0
    wb: tuple = (1.0, 1.0)
    vignette_ref: float | None = None

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise SceneError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        self.width = int(self.width)
        self.height = int(self.height)
        if self.width < 1 or self.height < 1:
            raise SceneError(f"invalid image size {self.width}x{self.height}")
        self.q = quat_normalize(self.q)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.vignette_ref is None:
            self.vignette_ref = math.hypot(0.5 * self.width / self.fx, 0.5 * self.height / self.fy)

    @property
    def R(self):
        return quat_to_rotation(self.q)

    @property
    def focal(self):
        return math.sqrt(self.fx * self.fy)

    @property
    def center(self):
        return -self.R.T @ self.t

    def world_to_view(self, x):
        return np.asarray(x, dtype=np.float64) @ self.R.T + self.t

    def compose(self, tangent):
        """Apply a 6-vector increment (axis-angle, translation) in view space."""
        tangent = np.asarray(tangent, dtype=np.float64)
        dq = axis_angle_to_quat(tangent[:3])
        dR = quat_to_rotation(dq)
        q = quat_normalize(quat_multiply(dq, self.q))
        t = dR @ self.t + tangent[3:]
        return replace(self, q=q, t=t)

    def scaled(self, zx, zy=None):
        """Camera for the same view rendered at ``zx``/``zy`` times the resolution."""
        zy = zx if zy is None else zy
        return replace(
            self,
            fx=self.fx * zx, fy=self.fy * zy,
            cx=(self.cx + 0.5) * zx - 0.5, cy=(self.cy + 0.5) * zy - 0.5,
            width=int(round(self.width * zx)), height=int(round(self.height * zy)),
        )

    def cropped(self, x0, y0, width, height):
        return replace(self, cx=self.cx - x0, cy=self.cy - y0, width=int(width), height=int(height))

    def pixel_rays(self, scale=1.0, width=None, height=None):
        """Unit world-space ray directions through pixel centers of a layer.

        Layer pixels at ``scale = 2**L`` map to layer-0 coordinates
        ``(j + 0.5) * scale - 0.5``. Returns (3, H, W).
        """
        w = self.width if width is None else width
        h = self.height if height is None else height
        u = (np.arange(w) + 0.5) * scale - 0.5
        v = (np.arange(h) + 0.5) * scale - 0.5
        dx = (u - self.cx) / self.fx
        dy = (v - self.cy) / self.fy
        d = np.empty((3, h, w))
        d[0] = dx[None, :]
        d[1] = dy[:, None]
        d[2] = 1.0
        d /= np.linalg.norm(d, axis=0, keepdims=True)
        cam_dirs = d
        return np.einsum("ji,jhw->ihw", self.R, cam_dirs), cam_dirs

    def radius_map(self):
        """Vignetting radius per pixel, 1.0 at the corners of the reference image."""
        u = np.arange(self.width)
        v = np.arange(self.height)
        dx = (u - self.cx) / self.fx
        dy = (v - self.cy) / self.fy
        return np.sqrt(dx[None, :] ** 2 + dy[:, None] ** 2) / self.vignette_ref


@dataclass
class PointCloud:
    """Optimizable points. Sizes and opacities are stored unconstrained."""
    positions: np.ndarray
    log_sizes: np.ndarray
    opacity_logits: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions)
        n = self.positions.shape[0]
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise SceneError(f"positions must be N x 3, got {self.positions.shape}")
        for name in ("log_sizes", "opacity_logits"):
            arr = np.asarray(getattr(self, name))
            if arr.shape != (n,):
                raise SceneError(f"{name} must have shape ({n},), got {arr.shape}")
            setattr(self, name, arr)
        self.descriptors = np.asarray(self.descriptors)
        if self.descriptors.ndim != 2 or self.descriptors.shape[0] != n:
            raise SceneError(f"descriptors must be {n} x F, got {self.descriptors.shape}")

    @classmethod
    def from_positions(cls, positions, n_features=4, sizes=None, opacity=0.5, colors=None,
                       rng=None, dtype=np.float32):
        positions = np.asarray(positions, dtype=dtype)
        n = positions.shape[0]
        rng = np.random.default_rng(0) if rng is None else rng
        desc = rng.normal(0.0, 0.25, size=(n, n_features)).astype(dtype)
        if colors is not None:
            k = min(3, n_features)
            desc[:, :k] = np.asarray(colors)[:, :k]
        log_sizes = np.zeros(n, dtype) if sizes is None else np.log(np.asarray(sizes, dtype))
        logit = math.log(opacity / (1 - opacity))
        return cls(positions, log_sizes.astype(dtype), np.full(n, logit, dtype), desc)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def n_features(self):
        return self.descriptors.shape[1]

    @property
    def sizes(self):
        return np.exp(self.log_sizes)

    @property
    def opacities(self):
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def extent(self):
        if len(self) == 0:
            return 1.0
        span = np.ptp(self.positions.astype(np.float64), axis=0)
        return float(max(span.max(), 1e-12))

    def copy(self):
        return PointCloud(self.positions.copy(), self.log_sizes.copy(),
                          self.opacity_logits.copy(), self.descriptors.copy())


@dataclass
class EnvironmentMap:
    """Background features: a constant vector or an equirectangular texture."""
    mode: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.mode == "constant":
            if self.values.ndim != 1:
                raise SceneError("constant environment needs an F-vector")
        elif self.mode == "latlong":
            if self.values.ndim != 3 or self.values.shape[2] != 2 * self.values.shape[1]:
                raise SceneError(f"equirectangular environment needs F x H x 2H, got {self.values.shape}")
        else:
            raise SceneError(f"unknown environment mode {self.mode!r}")

    @classmethod
    def constant(cls, n_features, value=0.0):
        return cls("constant", np.full(n_features, value, dtype=np.float32))

    @classmethod
    def latlong(cls, n_features, height=16, value=0.0):
        return cls("latlong", np.full((n_features, height, 2 * height), value, dtype=np.float32))

    @property
    def n_features(self):
        return self.values.shape[0]


@dataclass
class Frame:
    camera: Camera
    image_path: str | None = None
    image: np.ndarray | None = None  # (3, H, W) float in [0, 1]


@dataclass
class FrameSet:
    frames: list

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    @property
    def test_mask(self):
        return np.array([i % TEST_EVERY == 0 for i in range(len(self.frames))], dtype=bool)

    @property
    def train_indices(self):
        return np.flatnonzero(~self.test_mask)

    @property
    def test_indices(self):
        return np.flatnonzero(self.test_mask)

    @property
    def cameras(self):
        return [f.camera for f in self.frames]


# ---------------------------------------------------------------------------
# point-size initialization

@numba.njit(cache=True)
def _grid_knn_mean(pos, k, origin, cell, dims, cell_start, order, cell_of):
    n = pos.shape[0]
    out = np.empty(n)
    best = np.empty(k)
    for i in range(n):
        cx = cell_of[i, 0]
        cy = cell_of[i, 1]
        cz = cell_of[i, 2]
        for j in range(k):
            best[j] = np.inf
        found = 0
        r = 0
        maxr = max(dims[0], max(dims[1], dims[2]))
        while True:
            # visit only the shell at Chebyshev distance r
            for ix in range(cx - r, cx + r + 1):
                if ix < 0 or ix >= dims[0]:
                    continue
                for iy in range(cy - r, cy + r + 1):
                    if iy < 0 or iy >= dims[1]:
                        continue
                    for iz in range(cz - r, cz + r + 1):
                        if iz < 0 or iz >= dims[2]:
                            continue
                        if max(abs(ix - cx), max(abs(iy - cy), abs(iz - cz))) != r:
                            continue
                        c = (ix * dims[1] + iy) * dims[2] + iz
                        for s in range(cell_start[c], cell_start[c + 1]):
                            j = order[s]
                            if j == i:
                                continue
                            dx = pos[i, 0] - pos[j, 0]
                            dy = pos[i, 1] - pos[j, 1]
                            dz = pos[i, 2] - pos[j, 2]
                            d = math.sqrt(dx * dx + dy * dy + dz * dz)
                            if d < best[k - 1]:
                                m = k - 1
                                while m > 0 and best[m - 1] > d:
                                    best[m] = best[m - 1]
                                    m -= 1
                                best[m] = d
                                found += 1
            # unvisited points are at least r * cell away
            if (found >= k and best[k - 1] <= r * cell) or r > maxr:
                break
            r += 1
        acc = 0.0
        for j in range(k):
            acc += best[j]
        out[i] = acc / k
    return out


def knn_mean_distance(positions, k=4):
    """Mean distance from each point to its ``min(k, N-1)`` nearest neighbours.

    Uses a uniform grid with cell size ``extent / cbrt(N)``. Neighbour distances
    are summed in ascending order, so results match a brute-force search bit for
    bit.
    """
    pos = np.ascontiguousarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if n < 2:
        raise SceneError("need at least two points to initialize sizes")
    k = min(k, n - 1)
    lo = pos.min(axis=0)
    extent = float(max(np.ptp(pos, axis=0).max(), 1e-12))
    cell = extent / np.cbrt(n)
    dims = np.maximum(np.floor(np.ptp(pos, axis=0) / cell).astype(np.int64) + 1, 1)
    cell_of = np.minimum(np.floor((pos - lo) / cell).astype(np.int64), dims - 1)
    flat = (cell_of[:, 0] * dims[1] + cell_of[:, 1]) * dims[2] + cell_of[:, 2]
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=int(np.prod(dims)))
    cell_start = np.concatenate([[0], np.cumsum(counts)])
    return _grid_knn_mean(pos, k, lo, cell, dims, cell_start, order, cell_of), extent


def init_point_sizes(cloud: PointCloud, k=4):
    """Set world sizes to the mean distance to the 4 nearest neighbours."""
    d, extent = knn_mean_distance(cloud.positions, k)
    d = np.maximum(d, 1e-6 * extent)
    cloud.log_sizes = np.log(d).astype(cloud.log_sizes.dtype)
    return cloud


# ---------------------------------------------------------------------------
# validation

@dataclass
class ValidationReport:
    warnings: list = field(default_factory=list)

    def __bool__(self):
        return bool(self.warnings)


def validate_scene(cloud: PointCloud, frames: FrameSet | None = None, near=0.01):
    """Check a scene for problems. NaN positions are fatal; the rest is reported."""
    report = ValidationReport()
    bad = np.flatnonzero(~np.all(np.isfinite(cloud.positions), axis=1))
    if bad.size:
        raise SceneError(f"non-finite position at point index {int(bad[0])}"
                         + (f" (and {bad.size - 1} more)" if bad.size > 1 else ""))
    for name in ("log_sizes", "opacity_logits", "descriptors"):
        arr = getattr(cloud, name)
        nbad = int(np.sum(~np.isfinite(arr)))
        if nbad:
            report.warnings.append(f"{name}: {nbad} non-finite values")
    alpha = cloud.opacities
    nout = int(np.sum((alpha <= 0) | (alpha >= 1)))
    if nout:
        report.warnings.append(f"opacity: {nout} values outside (0, 1)")
    if frames is not None:
        for i, fr in enumerate(frames.frames):
            cam = fr.camera
            if len(cloud) == 0:
                report.warnings.append(f"frame {i}: no points in frustum")
                continue
            p = cam.world_to_view(cloud.positions)
            front = p[:, 2] > near
            x = cam.fx * p[front, 0] / p[front, 2] + cam.cx
            y = cam.fy * p[front, 1] / p[front, 2] + cam.cy
            inside = (x > -0.5) & (x < cam.width - 0.5) & (y > -0.5) & (y < cam.height - 0.5)
            if not np.any(inside):
                name = fr.image_path or f"#{i}"
                report.warnings.append(f"frame {i} ({name}): no points in frustum")
    for w in report.warnings:
        logger.warning(w)
    return report
