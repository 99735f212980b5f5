"""Window-based structural similarity and the training losses built on it.

One sliding-window implementation serves both evaluation (floats in, float
out) and training (tensors in, differentiable scalar out): local raw moments
are computed with a fixed uniform box kernel, stride 1, per channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, ParameterError


@dataclass
class SsimConfig:
    window: int = 8
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 2.0  # images live in [-1, 1]


_BOX_KERNELS = {}


def _box_kernel(window):
    # diagonal (3, 3, w, w) kernel: per-channel window mean, no channel mixing
    if window not in _BOX_KERNELS:
        k = np.zeros((3, 3, window, window))
        for c in range(3):
            k[c, c] = 1.0 / (window * window)
        _BOX_KERNELS[window] = ad.Tensor(k)
    return _BOX_KERNELS[window]


def mssim_t(a, b, cfg=None):
    """Mean SSIM over all stride-1 windows and channels, differentiable."""
    cfg = cfg or SsimConfig()
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mssim: shapes {a.shape} and {b.shape} differ")
    if a.data.ndim != 3 or a.shape[0] != 3:
        raise DimensionError(f"mssim expects (3, H, W), got {a.shape}")
    _, h, w = a.shape
    if cfg.window > min(h, w):
        raise DimensionError(f"window {cfg.window} larger than image {h}x{w}")
    if cfg.window <= 0 or cfg.k1 <= 0 or cfg.k2 <= 0 or cfg.dynamic_range <= 0:
        raise ParameterError("SSIM constants must be positive")
    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.k2 * cfg.dynamic_range) ** 2
    kern = _box_kernel(cfg.window)
    mu_a = ad.conv2d(a, kern)
    mu_b = ad.conv2d(b, kern)
    e_aa = ad.conv2d(ad.mul(a, a), kern)
    e_bb = ad.conv2d(ad.mul(b, b), kern)
    e_ab = ad.conv2d(ad.mul(a, b), kern)
    mu_ab = ad.mul(mu_a, mu_b)
    var_a = ad.sub(e_aa, ad.mul(mu_a, mu_a))
    var_b = ad.sub(e_bb, ad.mul(mu_b, mu_b))
    cov = ad.sub(e_ab, mu_ab)
    num = ad.mul(ad.add(ad.mul(mu_ab, 2.0), c1), ad.add(ad.mul(cov, 2.0), c2))
    den = ad.mul(
        ad.add(ad.add(ad.mul(mu_a, mu_a), ad.mul(mu_b, mu_b)), c1),
        ad.add(ad.add(var_a, var_b), c2),
    )
    return ad.tmean(ad.div(num, den))


def mssim(a, b, cfg=None):
    return mssim_t(ad.as_tensor(np.asarray(a)), ad.as_tensor(np.asarray(b)), cfg).item()


def l1_loss_t(a, b):
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"l1_loss: shapes {a.shape} and {b.shape} differ")
    return ad.tmean(ad.absolute(ad.sub(a, b)))


def l1_loss(a, b):
    return l1_loss_t(np.asarray(a), np.asarray(b)).item()


def l2_loss_t(a, b):
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"l2_loss: shapes {a.shape} and {b.shape} differ")
    d = ad.sub(a, b)
    return ad.tmean(ad.mul(d, d))


def l2_loss(a, b):
    return l2_loss_t(np.asarray(a), np.asarray(b)).item()


def combined_loss(a, b, lambda_mssim=0.7, cfg=None):
    """lambda * (1 - MSSIM) + (1 - lambda) * L1, as a differentiable scalar."""
    if not 0.0 <= lambda_mssim <= 1.0:
        raise ParameterError(f"lambda_mssim {lambda_mssim} outside [0, 1]")
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    mssim_term = ad.sub(1.0, mssim_t(a, b, cfg))
    return ad.add(ad.mul(mssim_term, lambda_mssim), ad.mul(l1_loss_t(a, b), 1.0 - lambda_mssim))
