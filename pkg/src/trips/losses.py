"""Image losses and metrics (MSE, SSIM, PSNR), with gradients w.r.t. the render."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03
DEFAULT_SSIM_WEIGHT = 0.2


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable 'valid' correlation over the last two axes
    k = g.size
    tmp = sliding_window_view(img, k, axis=-1) @ g
    return sliding_window_view(tmp, k, axis=-2) @ g


def _filter_valid_adjoint(grad, g, shape):
    k = g.size
    h, w = shape[-2:]
    tmp = np.zeros(grad.shape[:-2] + (h, grad.shape[-1]))
    for i in range(k):
        tmp[..., i:i + grad.shape[-2], :] += g[i] * grad
    out = np.zeros(grad.shape[:-2] + (h, w))
    for j in range(k):
        out[..., :, j:j + grad.shape[-1]] += g[j] * tmp
    return out


def ssim(img_a, img_b, return_grad=False):
    """Mean SSIM over pixels and channels for (C, H, W) images in [0, 1].

    Uses an 11x11 Gaussian window (sigma 1.5) over the valid region; images
    smaller than the window fall back to global statistics. With
    ``return_grad`` the gradient w.r.t. ``img_a`` is returned as well.
    """
    a = np.asarray(img_a, np.float64)
    b = np.asarray(img_b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    c1, c2 = K1 ** 2, K2 ** 2
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        return _ssim_global(a, b, c1, c2, return_grad)
    g = gaussian_window()
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num1 = 2 * mu_a * mu_b + c1
    num2 = 2 * sab + c2
    den1 = mu_a ** 2 + mu_b ** 2 + c1
    den2 = saa + sbb + c2
    smap = (num1 * num2) / (den1 * den2)
    value = float(smap.mean())
    if not return_grad:
        return value
    gs = 1.0 / smap.size
    d_num1 = gs * num2 / (den1 * den2)
    d_num2 = gs * num1 / (den1 * den2)
    d_den1 = -gs * smap / den1
    d_den2 = -gs * smap / den2
    d_mu_a = d_num1 * 2 * mu_b + d_den1 * 2 * mu_a
    d_saa = d_den2
    d_sab = 2 * d_num2
    # saa = E[a^2] - mu_a^2, sab = E[ab] - mu_a mu_b
    d_mu_a = d_mu_a - 2 * mu_a * d_saa - mu_b * d_sab
    grad = (_filter_valid_adjoint(d_mu_a, g, a.shape)
            + 2 * a * _filter_valid_adjoint(d_saa, g, a.shape)
            + b * _filter_valid_adjoint(d_sab, g, a.shape))
    return value, grad


def _ssim_global(a, b, c1, c2, return_grad):
    axes = (-2, -1)
    n = a.shape[-1] * a.shape[-2]
    mu_a = a.mean(axis=axes, keepdims=True)
    mu_b = b.mean(axis=axes, keepdims=True)
    da, db = a - mu_a, b - mu_b
    saa = (da * da).mean(axis=axes, keepdims=True)
    sbb = (db * db).mean(axis=axes, keepdims=True)
    sab = (da * db).mean(axis=axes, keepdims=True)
    num1, num2 = 2 * mu_a * mu_b + c1, 2 * sab + c2
    den1, den2 = mu_a ** 2 + mu_b ** 2 + c1, saa + sbb + c2
    s = num1 * num2 / (den1 * den2)
    value = float(s.mean())
    if not return_grad:
        return value
    gs = 1.0 / s.size
    d_mu_a = gs * (2 * mu_b * num2 / (den1 * den2) - s * 2 * mu_a / den1)
    d_sab = gs * 2 * num1 / (den1 * den2)
    d_saa = -gs * s / den2
    grad = d_mu_a / n + d_sab * db / n + d_saa * 2 * da / n
    return value, grad


def mse(img_a, img_b):
    d = np.asarray(img_a, np.float64) - np.asarray(img_b, np.float64)
    return float(np.mean(d * d))


def psnr(img_a, img_b, data_range=1.0):
    m = mse(img_a, img_b)
    if m == 0:
        return math.inf
    return 10 * math.log10(data_range ** 2 / m)


def total_loss(render, gt, epoch=None, ssim_weight=DEFAULT_SSIM_WEIGHT, return_grad=False):
    """``(1 - w) * MSE + w * (1 - SSIM)``, the training criterion for every epoch."""
    r = np.asarray(render, np.float64)
    t = np.asarray(gt, np.float64)
    if r.shape != t.shape:
        raise ValueError(f"render {r.shape} and ground truth {t.shape} are not aligned")
    d = r - t
    m = float(np.mean(d * d))
    if ssim_weight > 0:
        res = ssim(r, t, return_grad=return_grad)
        s, gs = res if return_grad else (res, None)
    else:
        s, gs = 1.0, None
    loss = (1 - ssim_weight) * m + ssim_weight * (1 - s)
    if not return_grad:
        return loss
    grad = (1 - ssim_weight) * 2 * d / d.size
    if gs is not None:
        grad = grad - ssim_weight * gs
    return loss, grad
