"""Degree-2 spherical-harmonics shading and a differentiable camera tone mapper."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import sigmoid, softplus

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
         1.0925484305920792, 0.5462742152960396)

N_KNOTS = 32
IDENTITY_DELTA = math.log(math.e - 1.0)  # softplus(IDENTITY_DELTA) == 1


def sh_basis(dirs):
    """Real SH basis up to degree 2 for unit directions ``dirs`` of shape (3, ...)."""
    x, y, z = dirs
    return np.stack([
        np.full_like(x, SH_C0),
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        -SH_C2[1] * y * z,
        SH_C2[2] * (2 * z * z - x * x - y * y),
        -SH_C2[3] * x * z,
        SH_C2[4] * (x * x - y * y),
    ])


def sh_basis_jacobian(dirs):
    """d basis / d dir, shape (9, 3, ...)."""
    x, y, z = dirs
    zero = np.zeros_like(x)
    c1, (a, b, c, d, e) = SH_C1, SH_C2
    rows = [
        (zero, zero, zero),
        (zero, -c1 + zero, zero),
        (zero, zero, c1 + zero),
        (-c1 + zero, zero, zero),
        (a * y, a * x, zero),
        (zero, -b * z, -b * y),
        (-2 * c * x, -2 * c * y, 4 * c * z),
        (-d * z, zero, -d * x),
        (2 * e * x, -2 * e * y, zero),
    ]
    return np.stack([np.stack(r) for r in rows])


def sh_shade(coeffs, dirs):
    """Linear RGB from 27 SH coefficients per pixel (9 per colour channel).

    ``coeffs``: (27, H, W) with channel ``c * 9 + i``; ``dirs``: (3, H, W) unit rays.
    """
    basis = sh_basis(dirs).astype(coeffs.dtype, copy=False)
    c = coeffs.reshape(3, 9, *coeffs.shape[1:])
    return np.einsum("cihw,ihw->chw", c, basis), basis


def sh_shade_backward(grad, coeffs, dirs, basis):
    """Return ``(grad_coeffs, grad_dirs)``."""
    g_coeffs = (grad[:, None] * basis[None]).reshape(coeffs.shape)
    c = coeffs.reshape(3, 9, *coeffs.shape[1:])
    g_basis = np.einsum("chw,cihw->ihw", grad, c)
    jac = sh_basis_jacobian(dirs)
    g_dirs = np.einsum("ihw,ijhw->jhw", g_basis, jac)
    return g_coeffs, g_dirs


# ---------------------------------------------------------------------------
# tone mapping

@dataclass
class ToneMapParams:
    """Neutral defaults: EV 0, unit white balance, identity response, no vignetting."""
    exposure: float = 0.0
    wb: np.ndarray = field(default_factory=lambda: np.ones(2))
    response: np.ndarray = field(default_factory=lambda: np.full((3, N_KNOTS - 1), IDENTITY_DELTA))
    vignette: np.ndarray = field(default_factory=lambda: np.zeros(3))


def response_knots(deltas):
    """Knot values (3, 32) of the monotone response curve, 0 at 0 and 1 at 1."""
    sp = softplus(np.asarray(deltas, dtype=np.float64))
    cum = np.concatenate([np.zeros((sp.shape[0], 1)), np.cumsum(sp, axis=1)], axis=1)
    return cum / cum[:, -1:]


def tone_map(hdr, params: ToneMapParams, radius):
    """Map linear radiance (3, H, W) to display values in [0, 1].

    ``out_c = response_c(clamp(hdr_c * 2**EV * wb_c * v, 0, 1))`` with
    ``v = 1 + a1 r^2 + a2 r^4 + a3 r^6``. Returns ``(out, cache)``.
    """
    dtype = hdr.dtype
    hdr = np.asarray(hdr, dtype=np.float64)
    r2 = np.asarray(radius, np.float64) ** 2
    a1, a2, a3 = params.vignette
    vig = 1 + a1 * r2 + a2 * r2 ** 2 + a3 * r2 ** 3
    wb = np.array([params.wb[0], 1.0, params.wb[1]])
    gain = 2.0 ** params.exposure * wb[:, None, None] * vig[None]
    pos = np.maximum(hdr, 0.0)
    pre_raw = pos * gain
    pre = np.clip(pre_raw, 0.0, 1.0)
    inside = (hdr > 0) & (pre_raw < 1.0)

    sp = softplus(np.asarray(params.response, np.float64))
    total = sp.sum(axis=1)
    knots = response_knots(params.response)
    nseg = N_KNOTS - 1
    u = pre * nseg
    seg = np.minimum(np.floor(u).astype(np.int64), nseg - 1)
    frac = u - seg
    out = np.empty_like(pre)
    slope = np.empty_like(pre)
    for c in range(3):
        y0 = knots[c][seg[c]]
        y1 = knots[c][seg[c] + 1]
        out[c] = y0 + (y1 - y0) * frac[c]
        slope[c] = (y1 - y0) * nseg
    cache = dict(hdr=hdr, pos=pos, pre=pre, inside=inside, vig=vig, r2=r2, wb=wb, gain=gain,
                 sp=sp, total=total, u=u, out=out, slope=slope, params=params)
    return out.astype(dtype, copy=False), cache


def tone_map_backward(grad, cache):
    """Return ``(grad_hdr, grads)``; ``grads`` has exposure, wb (r, b), response, vignette."""
    g = np.asarray(grad, np.float64)
    params = cache["params"]
    g_pre = g * cache["slope"] * cache["inside"]
    pre, pos = cache["pre"], cache["pos"]
    g_hdr = g_pre * cache["gain"]
    g_ev = float(np.sum(g_pre * pre)) * math.log(2.0)
    base = pos * (2.0 ** params.exposure) * cache["vig"][None]
    g_wb_all = np.sum(g_pre * base, axis=(1, 2))
    g_wb = np.array([g_wb_all[0], g_wb_all[2]])
    dvig = np.sum(g_pre * pos * (2.0 ** params.exposure) * cache["wb"][:, None, None], axis=0)
    r2 = cache["r2"]
    g_vig = np.array([np.sum(dvig * r2), np.sum(dvig * r2 ** 2), np.sum(dvig * r2 ** 3)])

    # d out / d softplus_j = (clamp(u - j, 0, 1) - out) / total
    nseg = N_KNOTS - 1
    j = np.arange(nseg)
    g_resp = np.empty((3, nseg))
    for c in range(3):
        u = cache["u"][c].reshape(-1)
        gc = g[c].reshape(-1)
        w = np.clip(u[:, None] - j[None, :], 0.0, 1.0)
        g_sp = (gc @ w - np.sum(gc * cache["out"][c].reshape(-1))) / cache["total"][c]
        g_resp[c] = g_sp * sigmoid(np.asarray(params.response[c], np.float64))
    grads = {"exposure": g_ev, "wb": g_wb, "response": g_resp, "vignette": g_vig}
    return g_hdr, grads
