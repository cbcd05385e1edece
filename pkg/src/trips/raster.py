"""Differentiable trilinear point splatting into an image pyramid.

Each point is projected, given a screen-space size ``s = f * s_w / z`` and
written as a bilinear 2x2 splat into the one or two pyramid layers whose pixel
size (``2**L``) brackets ``s``. Per-pixel fragment lists are depth sorted,
truncated to the nearest ``cap`` entries and alpha blended front to back.

Layer ``L`` pixel ``j`` has its center at layer-0 coordinate
``(j + 0.5) * 2**L - 0.5``, which matches the upsampling used by the decoder.

Internally everything runs in float64; the returned pyramid is cast to the
requested working dtype.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numba
import numpy as np
from numba import prange

from .scene import Camera, EnvironmentMap, PointCloud

SLOTS = 8  # fragments per point: 2 layers x 2x2 pixels


@dataclass
class RasterConfig:
    n_layers: int = 4
    cap: int = 16
    eps: float = 0.25
    near: float = 0.01

    def __post_init__(self):
        if not 3 <= self.n_layers <= 8:
            raise ValueError(f"n_layers must be in [3, 8], got {self.n_layers}")
        if self.cap < 1:
            raise ValueError("cap must be positive")


def layer_shapes(height, width, n_layers):
    return [(-(-height // 2 ** L), -(-width // 2 ** L)) for L in range(n_layers)]


# ---------------------------------------------------------------------------
# scalar API

class ProjectedPoint(NamedTuple):
    x: float
    y: float
    z: float
    s: float
    index: int


class LayerSelection(NamedTuple):
    lo: int
    hi: int
    iota_lo: float
    iota_hi: float


class Fragment(NamedTuple):
    depth: float
    weight: float
    index: int
    layer: int
    x: int
    y: int
    beta: float
    iota: float


def screen_size(f, s_w, z):
    """Projected point size in pixels."""
    return f * s_w / z


@numba.njit(cache=True)
def _select(s, n_layers, eps):
    # (lo, hi, iota_lo, iota_hi, d iota_lo/ds, d iota_hi/ds); hi == -1 means one layer
    if s < 1.0:
        return 0, -1, eps + (1.0 - eps) * s, 0.0, 1.0 - eps, 0.0
    if s >= 2.0 ** (n_layers - 1):
        return n_layers - 1, -1, 1.0, 0.0, 0.0, 0.0
    lo = int(math.floor(math.log2(s)))
    while 2.0 ** lo > s:
        lo -= 1
    while 2.0 ** (lo + 1) <= s:
        lo += 1
    p = 2.0 ** lo
    if s == p:
        return lo, -1, 1.0, 0.0, 0.0, 0.0
    q = 2.0 ** (lo + 1)
    d = q - p
    return lo, lo + 1, 1.0 - (s - p) / d, 1.0 - (q - s) / d, -1.0 / d, 1.0 / d


def select_layers(s, n_layers, eps=0.25):
    """Pick the pyramid layers for a point of screen size ``s``.

    Returns ``(lo, hi, iota_lo, iota_hi)``. When only one layer is written
    ``lo == hi`` and ``iota_hi == 0``.
    """
    if not s > 0:
        raise ValueError(f"screen size must be positive, got {s}")
    lo, hi, il, ih, _, _ = _select(float(s), int(n_layers), float(eps))
    if hi < 0:
        return LayerSelection(lo, lo, il, 0.0)
    return LayerSelection(lo, hi, il, ih)


def project_point(camera: Camera, x_w, s_w=None, n_layers=4, near=0.01, index=0):
    """Project one world point; returns ``None`` when culled.

    Without ``s_w`` the point is treated as a layer-0 splat for the footprint test.
    """
    R, t = camera.R, camera.t
    p = [R[r, 0] * x_w[0] + R[r, 1] * x_w[1] + R[r, 2] * x_w[2] + t[r] for r in range(3)]
    if not p[2] > near:
        return None
    x = camera.fx * p[0] / p[2] + camera.cx
    y = camera.fy * p[1] / p[2] + camera.cy
    s = screen_size(camera.focal, s_w, p[2]) if s_w is not None else 1.0
    sel = select_layers(s, n_layers)
    L = sel.hi
    h, w = layer_shapes(camera.height, camera.width, n_layers)[L]
    scale = 2.0 ** L
    xl = (x + 0.5) / scale - 0.5
    yl = (y + 0.5) / scale - 0.5
    if xl <= -1 or yl <= -1 or xl >= w or yl >= h:
        return None
    return ProjectedPoint(x, y, p[2], s, index)


def splat_point(pp: ProjectedPoint, alpha, sel: LayerSelection, shapes):
    """Bilinear 2x2 writes into each selected layer; out-of-bounds pixels dropped."""
    out = []
    layers = [(sel.lo, sel.iota_lo)]
    if sel.hi != sel.lo:
        layers.append((sel.hi, sel.iota_hi))
    for L, iota in layers:
        h, w = shapes[L]
        scale = 2.0 ** L
        xl = (pp.x + 0.5) / scale - 0.5
        yl = (pp.y + 0.5) / scale - 0.5
        x0, y0 = math.floor(xl), math.floor(yl)
        fx, fy = xl - x0, yl - y0
        for c in range(4):
            ox, oy = c & 1, c >> 1
            xi, yi = x0 + ox, y0 + oy
            if not (0 <= xi < w and 0 <= yi < h):
                continue
            wx = 1.0 - fx if ox == 0 else fx
            wy = 1.0 - fy if oy == 0 else fy
            beta = wx * wy
            out.append(Fragment(pp.z, beta * iota * alpha, pp.index, L, xi, yi, beta, iota))
    return out


def blend_pixel(fragments, descriptors, background):
    """Front-to-back compositing of an already depth-sorted fragment list.

    Returns ``(features, accumulated_opacity)``.
    """
    background = np.asarray(background, dtype=np.float64)
    color = np.zeros_like(background)
    T = 1.0
    for frag in fragments:
        w = T * frag.weight
        color = color + w * np.asarray(descriptors[frag.index], dtype=np.float64)
        T = T * (1.0 - frag.weight)
    color = color + T * background
    return color, 1.0 - T


# ---------------------------------------------------------------------------
# kernels

@numba.njit(parallel=True, cache=True)
def _collect(pos, sw, alpha, R, t, fx, fy, cx, cy, focal, n_layers, near, eps,
             lw, lh, loff, view, screen, frag_pix, frag_w):
    n = pos.shape[0]
    for i in prange(n):
        for k in range(SLOTS):
            frag_pix[i, k] = -1
            frag_w[i, k] = 0.0
        px = R[0, 0] * pos[i, 0] + R[0, 1] * pos[i, 1] + R[0, 2] * pos[i, 2] + t[0]
        py = R[1, 0] * pos[i, 0] + R[1, 1] * pos[i, 1] + R[1, 2] * pos[i, 2] + t[1]
        pz = R[2, 0] * pos[i, 0] + R[2, 1] * pos[i, 1] + R[2, 2] * pos[i, 2] + t[2]
        view[i, 0] = px
        view[i, 1] = py
        view[i, 2] = pz
        if not pz > near:
            screen[i, 0] = np.nan
            screen[i, 1] = np.nan
            screen[i, 2] = np.nan
            continue
        x = fx * px / pz + cx
        y = fy * py / pz + cy
        s = focal * sw[i] / pz
        screen[i, 0] = x
        screen[i, 1] = y
        screen[i, 2] = s
        lo, hi, il, ih, _, _ = _select(s, n_layers, eps)
        for li in range(2):
            L = lo if li == 0 else hi
            if L < 0:
                continue
            iota = il if li == 0 else ih
            scale = 2.0 ** L
            xl = (x + 0.5) / scale - 0.5
            yl = (y + 0.5) / scale - 0.5
            if not (xl > -1.0 and yl > -1.0 and xl < lw[L] and yl < lh[L]):
                continue
            x0 = math.floor(xl)
            y0 = math.floor(yl)
            fxr = xl - x0
            fyr = yl - y0
            for c in range(4):
                ox = c & 1
                oy = c >> 1
                xi = int(x0) + ox
                yi = int(y0) + oy
                if xi < 0 or xi >= lw[L] or yi < 0 or yi >= lh[L]:
                    continue
                wx = 1.0 - fxr if ox == 0 else fxr
                wy = 1.0 - fyr if oy == 0 else fyr
                beta = wx * wy
                frag_pix[i, li * 4 + c] = loff[L] + yi * lw[L] + xi
                frag_w[i, li * 4 + c] = beta * iota * alpha[i]


@numba.njit(cache=True)
def _count(frag_pix, n_pixels):
    counts = np.zeros(n_pixels + 1, dtype=np.int64)
    flat = frag_pix.reshape(-1)
    for f in range(flat.size):
        p = flat[f]
        if p >= 0:
            counts[p + 1] += 1
    for p in range(n_pixels):
        counts[p + 1] += counts[p]
    return counts


@numba.njit(cache=True)
def _scatter(frag_pix, offsets):
    flat = frag_pix.reshape(-1)
    n_pixels = offsets.size - 1
    cursor = offsets[:n_pixels].copy()
    lists = np.empty(offsets[n_pixels], dtype=np.int64)
    for f in range(flat.size):
        p = flat[f]
        if p >= 0:
            lists[cursor[p]] = f
            cursor[p] += 1
    return lists


@numba.njit(parallel=True, cache=True)
def _sort_blend(offsets, lists, depth, frag_w, desc, bg, cap, out, ids, nsorted):
    n_pixels = offsets.size - 1
    nf = desc.shape[1]
    for p in prange(n_pixels):
        n = 0
        for j in range(offsets[p], offsets[p + 1]):
            f = lists[j]
            z = depth[f >> 3]
            if n == cap:
                last = ids[p, cap - 1]
                zl = depth[last >> 3]
                if z > zl or (z == zl and f > last):
                    continue
                m = cap - 1
            else:
                m = n
                n += 1
            while m > 0:
                prev = ids[p, m - 1]
                zp = depth[prev >> 3]
                if zp > z or (zp == z and prev > f):
                    ids[p, m] = prev
                    m -= 1
                else:
                    break
            ids[p, m] = f
        nsorted[p] = n
        for c in range(nf):
            out[p, c] = 0.0
        T = 1.0
        for m in range(n):
            f = ids[p, m]
            g = frag_w[f]
            w = T * g
            for c in range(nf):
                out[p, c] += w * desc[f >> 3, c]
            T = T * (1.0 - g)
        for c in range(nf):
            out[p, c] += T * bg[p, c]
        out[p, nf] = 1.0 - T


@numba.njit(parallel=True, cache=True)
def _blend_backward(ids, nsorted, frag_w, desc, bg, gout, tbuf, rbuf, dgamma, dtau, dbg):
    n_pixels = nsorted.size
    nf = desc.shape[1]
    for p in prange(n_pixels):
        n = nsorted[p]
        T = 1.0
        for m in range(n):
            tbuf[p, m] = T
            T = T * (1.0 - frag_w[ids[p, m]])
        gA = gout[p, nf]
        for c in range(nf):
            dbg[p, c] = gout[p, c] * T
            rbuf[p, c] = bg[p, c]
        U = 1.0
        for m in range(n - 1, -1, -1):
            f = ids[p, m]
            g = frag_w[f]
            Tm = tbuf[p, m]
            dot = 0.0
            for c in range(nf):
                dot += gout[p, c] * (desc[f >> 3, c] - rbuf[p, c])
                dtau[f, c] = gout[p, c] * Tm * g
            dgamma[f] = Tm * dot + gA * Tm * U
            for c in range(nf):
                rbuf[p, c] = g * desc[f >> 3, c] + (1.0 - g) * rbuf[p, c]
            U = U * (1.0 - g)


@numba.njit(parallel=True, cache=True)
def _point_backward(view, screen, sw, alpha, R, fx, fy, n_layers, eps, dgamma, dtau,
                    dpos, dlogs, dalpha, ddesc, dpose):
    n = view.shape[0]
    nf = dtau.shape[2]
    for i in prange(n):
        for c in range(nf):
            ddesc[i, c] = 0.0
        for k in range(3):
            dpos[i, k] = 0.0
        for k in range(6):
            dpose[i, k] = 0.0
        dlogs[i] = 0.0
        dalpha[i] = 0.0
        px = view[i, 0]
        py = view[i, 1]
        pz = view[i, 2]
        x = screen[i, 0]
        if not (x == x):
            continue
        y = screen[i, 1]
        s = screen[i, 2]
        lo, hi, il, ih, dil, dih = _select(s, n_layers, eps)
        dx = 0.0
        dy = 0.0
        ds = 0.0
        da = 0.0
        for li in range(2):
            L = lo if li == 0 else hi
            if L < 0:
                continue
            iota = il if li == 0 else ih
            diota_ds = dil if li == 0 else dih
            scale = 2.0 ** L
            xl = (x + 0.5) / scale - 0.5
            yl = (y + 0.5) / scale - 0.5
            if not (xl > -1.0 and yl > -1.0):
                continue
            fxr = xl - math.floor(xl)
            fyr = yl - math.floor(yl)
            d_iota = 0.0
            dxl = 0.0
            dyl = 0.0
            for c in range(4):
                k = li * 4 + c
                g = dgamma[i, k]
                for ch in range(nf):
                    ddesc[i, ch] += dtau[i, k, ch]
                if g == 0.0:
                    continue
                ox = c & 1
                oy = c >> 1
                wx = 1.0 - fxr if ox == 0 else fxr
                wy = 1.0 - fyr if oy == 0 else fyr
                dwx = -1.0 if ox == 0 else 1.0
                dwy = -1.0 if oy == 0 else 1.0
                beta = wx * wy
                da += g * beta * iota
                d_iota += g * beta * alpha[i]
                dbeta = g * iota * alpha[i]
                dxl += dbeta * dwx * wy
                dyl += dbeta * wx * dwy
            dx += dxl / scale
            dy += dyl / scale
            ds += d_iota * diota_ds
        dalpha[i] = da
        dlogs[i] = ds * s
        dpx = dx * fx / pz
        dpy = dy * fy / pz
        dpz = -dx * fx * px / (pz * pz) - dy * fy * py / (pz * pz) - ds * s / pz
        for k in range(3):
            dpos[i, k] = R[0, k] * dpx + R[1, k] * dpy + R[2, k] * dpz
        dpose[i, 0] = py * dpz - pz * dpy
        dpose[i, 1] = pz * dpx - px * dpz
        dpose[i, 2] = px * dpy - py * dpx
        dpose[i, 3] = dpx
        dpose[i, 4] = dpy
        dpose[i, 5] = dpz


# ---------------------------------------------------------------------------
# environment lookup

def _latlong_coords(dirs, h, w):
    x, y, z = dirs
    lon = np.arctan2(y, x)
    lat = np.arcsin(np.clip(z, -1.0, 1.0))
    u = (lon + np.pi) / (2 * np.pi) * w - 0.5
    v = (np.pi / 2 - lat) / np.pi * h - 0.5
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu = u - u0
    fv = v - v0
    corners = []
    for dv, wv in ((0, 1 - fv), (1, fv)):
        for du, wu in ((0, 1 - fu), (1, fu)):
            vv = np.clip(v0 + dv, 0, h - 1)
            uu = (u0 + du) % w
            corners.append((vv * w + uu, wu * wv))
    return corners


def environment_background(env: EnvironmentMap, camera: Camera, shapes):
    """Background features for every pyramid pixel, shape (P, F), plus lookup data."""
    nf = env.n_features
    total = sum(h * w for h, w in shapes)
    if env.mode == "constant":
        return np.broadcast_to(np.asarray(env.values, np.float64), (total, nf)), None
    tex = np.asarray(env.values, np.float64)
    _, th, tw = tex.shape
    flat_tex = tex.reshape(nf, -1)
    bg = np.empty((total, nf))
    lookups = []
    off = 0
    for L, (h, w) in enumerate(shapes):
        dirs, _ = camera.pixel_rays(scale=2.0 ** L, width=w, height=h)
        corners = _latlong_coords(dirs.reshape(3, -1), th, tw)
        acc = np.zeros((nf, h * w))
        for idx, wt in corners:
            acc += flat_tex[:, idx] * wt
        bg[off:off + h * w] = acc.T
        lookups.append((off, h * w, corners))
        off += h * w
    return bg, lookups


def environment_backward(env: EnvironmentMap, dbg, lookups):
    nf = env.n_features
    if env.mode == "constant":
        return dbg.sum(axis=0)
    _, th, tw = env.values.shape
    g = np.zeros((nf, th * tw))
    for off, n, corners in lookups:
        gp = dbg[off:off + n].T
        for idx, wt in corners:
            for c in range(nf):
                g[c] += np.bincount(idx, weights=gp[c] * wt, minlength=th * tw)
    return g.reshape(nf, th, tw)


# ---------------------------------------------------------------------------
# forward / backward

@dataclass
class RasterSavedState:
    camera: Camera
    config: RasterConfig
    shapes: list
    R: np.ndarray
    view: np.ndarray
    screen: np.ndarray
    sw: np.ndarray
    alpha: np.ndarray
    desc: np.ndarray
    frag_pix: np.ndarray
    frag_w: np.ndarray
    ids: np.ndarray
    nsorted: np.ndarray
    bg: np.ndarray
    env_lookups: object
    env: EnvironmentMap | None
    timings: dict = field(default_factory=dict)

    @property
    def n_points(self):
        return self.view.shape[0]

    def fragment_stats(self):
        n = max(self.n_points, 1)
        per_point = np.sum(self.frag_pix >= 0, axis=1)
        counts = np.bincount(self.frag_pix[self.frag_pix >= 0], minlength=self.nsorted.size)
        nonempty = counts > 0
        truncated = int(np.sum(np.maximum(counts - self.config.cap, 0)))
        total = int(counts.sum())
        return {
            "fragments": total,
            "fragments_per_point_max": int(per_point.max()) if per_point.size else 0,
            "fragments_per_point_mean": float(total / n),
            "mean_list_length": float(counts[nonempty].mean()) if nonempty.any() else 0.0,
            "truncation_rate": float(truncated / total) if total else 0.0,
        }


@dataclass
class RasterGrads:
    positions: np.ndarray
    log_sizes: np.ndarray
    opacity_logits: np.ndarray
    descriptors: np.ndarray
    pose: np.ndarray
    environment: np.ndarray | None


def rasterize_forward(cloud: PointCloud, camera: Camera, config: RasterConfig | None = None,
                      env: EnvironmentMap | None = None, background=None, dtype=np.float32):
    """Rasterize ``cloud`` into an image pyramid.

    Returns ``(pyramid, saved)`` where ``pyramid[L]`` has shape
    ``(F + 1, ceil(H / 2**L), ceil(W / 2**L))``: blended features followed by the
    accumulated opacity.
    """
    config = config or RasterConfig()
    t0 = time.perf_counter()
    n_layers = config.n_layers
    shapes = layer_shapes(camera.height, camera.width, n_layers)
    lh = np.array([h for h, _ in shapes], dtype=np.int64)
    lw = np.array([w for _, w in shapes], dtype=np.int64)
    loff = np.concatenate([[0], np.cumsum(lh * lw)]).astype(np.int64)
    n_pixels = int(loff[-1])
    nf = cloud.n_features

    pos = np.ascontiguousarray(cloud.positions, dtype=np.float64)
    sw = np.exp(np.asarray(cloud.log_sizes, dtype=np.float64))
    alpha = 1.0 / (1.0 + np.exp(-np.asarray(cloud.opacity_logits, dtype=np.float64)))
    desc = np.ascontiguousarray(cloud.descriptors, dtype=np.float64)
    n = pos.shape[0]
    R = camera.R
    t = camera.t

    if env is not None:
        bg, lookups = environment_background(env, camera, shapes)
    else:
        bgv = np.zeros(nf) if background is None else np.asarray(background, np.float64)
        bg, lookups = np.broadcast_to(bgv, (n_pixels, nf)), None
    bg = np.ascontiguousarray(bg)

    view = np.empty((n, 3))
    screen = np.empty((n, 3))
    frag_pix = np.empty((n, SLOTS), dtype=np.int64)
    frag_w = np.empty((n, SLOTS))
    if n:
        _collect(pos, sw, alpha, R, t, float(camera.fx), float(camera.fy), float(camera.cx),
                 float(camera.cy), float(camera.focal), n_layers, float(config.near),
                 float(config.eps), lw, lh, loff, view, screen, frag_pix, frag_w)
    offsets = _count(frag_pix, n_pixels)
    t1 = time.perf_counter()
    lists = _scatter(frag_pix, offsets)
    t2 = time.perf_counter()
    out = np.empty((n_pixels, nf + 1))
    ids = np.empty((n_pixels, config.cap), dtype=np.int64)
    nsorted = np.empty(n_pixels, dtype=np.int64)
    depth = np.ascontiguousarray(view[:, 2])
    _sort_blend(offsets, lists, depth, frag_w.reshape(-1), desc, bg, config.cap, out, ids, nsorted)
    t3 = time.perf_counter()

    pyramid = []
    for L, (h, w) in enumerate(shapes):
        block = out[loff[L]:loff[L + 1]]
        pyramid.append(np.ascontiguousarray(block.T.reshape(nf + 1, h, w), dtype=dtype))
    saved = RasterSavedState(
        camera=camera, config=config, shapes=shapes, R=R, view=view, screen=screen, sw=sw,
        alpha=alpha, desc=desc, frag_pix=frag_pix, frag_w=frag_w, ids=ids, nsorted=nsorted,
        bg=bg, env_lookups=lookups, env=env,
        timings={"count_alloc": (t1 - t0) * 1e3, "splat": (t2 - t1) * 1e3,
                 "sort_blend": (t3 - t2) * 1e3},
    )
    return pyramid, saved


def rasterize_backward(saved: RasterSavedState, grad_pyramid) -> RasterGrads:
    """Gradients of a scalar loss given ``d loss / d pyramid``.

    Depth order is treated as constant; fragments cut by the per-pixel cap get
    zero gradient.
    """
    shapes = saved.shapes
    nf = saved.desc.shape[1]
    if len(grad_pyramid) != len(shapes):
        raise ValueError(f"saved state has {len(shapes)} layers, gradient has {len(grad_pyramid)}")
    parts = []
    for L, ((h, w), g) in enumerate(zip(shapes, grad_pyramid)):
        if g.shape != (nf + 1, h, w):
            raise ValueError(f"layer {L}: gradient shape {g.shape} does not match saved {(nf + 1, h, w)}")
        parts.append(np.asarray(g, dtype=np.float64).reshape(nf + 1, -1).T)
    gout = np.ascontiguousarray(np.concatenate(parts, axis=0))
    n_pixels = gout.shape[0]
    n = saved.n_points
    cap = saved.ids.shape[1]

    dgamma = np.zeros(n * SLOTS)
    dtau = np.zeros((n * SLOTS, nf))
    dbg = np.empty((n_pixels, nf))
    tbuf = np.empty((n_pixels, cap))
    rbuf = np.empty((n_pixels, nf))
    _blend_backward(saved.ids, saved.nsorted, saved.frag_w.reshape(-1), saved.desc, saved.bg,
                    gout, tbuf, rbuf, dgamma, dtau, dbg)

    dpos = np.empty((n, 3))
    dlogs = np.empty(n)
    dalpha = np.empty(n)
    ddesc = np.empty((n, nf))
    dpose = np.empty((n, 6))
    cam = saved.camera
    if n:
        _point_backward(saved.view, saved.screen, saved.sw, saved.alpha, saved.R,
                        float(cam.fx), float(cam.fy), saved.config.n_layers, float(saved.config.eps),
                        dgamma.reshape(n, SLOTS), dtau.reshape(n, SLOTS, nf),
                        dpos, dlogs, dalpha, ddesc, dpose)
    dlogit = dalpha * saved.alpha * (1.0 - saved.alpha)
    denv = environment_backward(saved.env, dbg, saved.env_lookups) if saved.env is not None else None
    return RasterGrads(dpos, dlogs, dlogit, ddesc, dpose.sum(axis=0), denv)
