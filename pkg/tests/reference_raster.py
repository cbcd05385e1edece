"""Naive single-threaded rasterizer used as a test oracle.

Builds complete per-pixel fragment lists, fully sorts them by (depth, fragment
id), truncates to the cap and composites front to back. Arithmetic follows the
same operation order as the optimized kernels so results can be compared
bit for bit in float64.
"""
import math

import numpy as np


def reference_select(s, n_layers, eps=0.25):
    if s < 1.0:
        return [(0, eps + (1.0 - eps) * s)]
    if s >= 2.0 ** (n_layers - 1):
        return [(n_layers - 1, 1.0)]
    lo = 0
    while 2.0 ** (lo + 1) <= s:
        lo += 1
    p, q = 2.0 ** lo, 2.0 ** (lo + 1)
    if s == p:
        return [(lo, 1.0)]
    d = q - p
    return [(lo, 1.0 - (s - p) / d), (lo + 1, 1.0 - (q - s) / d)]


def reference_rasterize(cloud, camera, n_layers=4, cap=16, eps=0.25, near=0.01, background=None):
    """Return a list of (F+1, h, w) float64 arrays."""
    nf = cloud.n_features
    shapes = [(-(-camera.height // 2 ** L), -(-camera.width // 2 ** L)) for L in range(n_layers)]
    pos = np.asarray(cloud.positions, np.float64)
    sw = np.exp(np.asarray(cloud.log_sizes, np.float64))
    alpha = 1.0 / (1.0 + np.exp(-np.asarray(cloud.opacity_logits, np.float64)))
    desc = np.asarray(cloud.descriptors, np.float64)
    bg = np.zeros(nf) if background is None else np.asarray(background, np.float64)
    R, t = camera.R, camera.t
    X, Y, Z = pos[:, 0], pos[:, 1], pos[:, 2]
    view = [R[r, 0] * X + R[r, 1] * Y + R[r, 2] * Z + t[r] for r in range(3)]

    lists = [dict() for _ in range(n_layers)]
    for i in range(pos.shape[0]):
        px, py, pz = float(view[0][i]), float(view[1][i]), float(view[2][i])
        if not pz > near:
            continue
        x = camera.fx * px / pz + camera.cx
        y = camera.fy * py / pz + camera.cy
        s = camera.focal * sw[i] / pz
        for li, (L, iota) in enumerate(reference_select(s, n_layers, eps)):
            h, w = shapes[L]
            scale = 2.0 ** L
            xl = (x + 0.5) / scale - 0.5
            yl = (y + 0.5) / scale - 0.5
            if not (xl > -1.0 and yl > -1.0 and xl < w and yl < h):
                continue
            x0, y0 = math.floor(xl), math.floor(yl)
            fx, fy = xl - x0, yl - y0
            for c in range(4):
                ox, oy = c & 1, c >> 1
                xi, yi = x0 + ox, y0 + oy
                if not (0 <= xi < w and 0 <= yi < h):
                    continue
                wx = 1.0 - fx if ox == 0 else fx
                wy = 1.0 - fy if oy == 0 else fy
                gamma = wx * wy * iota * alpha[i]
                fid = 8 * i + 4 * li + c
                lists[L].setdefault((yi, xi), []).append((pz, fid, gamma, i))

    out = []
    for L, (h, w) in enumerate(shapes):
        img = np.empty((nf + 1, h, w))
        for yi in range(h):
            for xi in range(w):
                frags = sorted(lists[L].get((yi, xi), []), key=lambda f: (f[0], f[1]))[:cap]
                color = [0.0] * nf
                T = 1.0
                for _, _, g, i in frags:
                    wgt = T * g
                    for c in range(nf):
                        color[c] += wgt * desc[i, c]
                    T = T * (1.0 - g)
                for c in range(nf):
                    img[c, yi, xi] = color[c] + T * bg[c]
                img[nf, yi, xi] = 1.0 - T
        out.append(img)
    return out


def random_scene(rng, n_points, width=48, height=40, n_features=4, dup_depth=False):
    """Points in front of an identity-pose camera with mixed sizes and opacities."""
    from trips.scene import Camera, PointCloud

    cam = Camera(fx=width * 0.9, fy=width * 0.85, cx=width / 2 - 0.3, cy=height / 2 + 0.2,
                 width=width, height=height)
    z = rng.uniform(0.5, 3.0, n_points)
    xy = rng.uniform(-0.7, 0.7, (n_points, 2)) * z[:, None]
    pos = np.column_stack([xy, z])
    if dup_depth and n_points > 4:
        pos[1::3, 2] = pos[0, 2]  # force depth ties to exercise the tie-break
    # world sizes spanning sub-pixel up to beyond the coarsest layer
    s_px = np.exp(rng.uniform(np.log(0.2), np.log(20.0), n_points))
    log_sizes = np.log(s_px * pos[:, 2] / cam.focal)
    cloud = PointCloud(pos, log_sizes, rng.normal(0, 1.5, n_points),
                       rng.uniform(0, 1, (n_points, n_features)))
    return cloud, cam
