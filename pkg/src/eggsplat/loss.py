"""Image-space losses and their gradients with respect to the render.

The total loss is (1 - lam) * L1 + lam * D_SSIM.  In the edge-weighted
variant the per-pixel weight map multiplies the residual inside the L1
term only; the structural term is never weighted.  Both terms are means,
so lam balances them independent of resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _raster
from .core import ImageF
from .edge import EdgeConfig, WeightMap
from .errors import ConfigurationError, DimensionMismatchError

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossConfig:
    """Loss weights; ``dssim_scale`` selects 1-SSIM (1.0) or (1-SSIM)/2 (0.5)."""

    lam: float = 0.2
    variant: str = "baseline"
    edge: EdgeConfig = field(default_factory=EdgeConfig)
    dssim_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        if self.variant not in ("baseline", "eggs"):
            raise ValueError("variant must be 'baseline' or 'eggs'")


def _check_dims(c: ImageF, im: ImageF) -> None:
    if c.data.shape != im.data.shape:
        raise DimensionMismatchError(f"{c.data.shape} vs {im.data.shape}")


def l1_term(c: ImageF, im: ImageF, phi: WeightMap | None = None) -> float:
    """Mean absolute error over pixels and channels, optionally weighted."""
    _check_dims(c, im)
    ad = np.abs(c.data - im.data)
    if phi is not None:
        if (phi.height, phi.width) != (c.height, c.width):
            raise DimensionMismatchError("weight map does not match images")
        ad = phi.data[:, :, None] * ad
    return float(np.mean(ad))


def _window_kernel() -> np.ndarray:
    r = np.arange(WINDOW_SIZE) - (WINDOW_SIZE - 1) / 2.0
    k = np.exp(-(r * r) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA))
    return k / np.sum(k)


_KERNEL = _window_kernel()


def _require_window(x: ImageF) -> None:
    if x.height < WINDOW_SIZE or x.width < WINDOW_SIZE:
        raise DimensionMismatchError(
            f"image {x.height}x{x.width} smaller than the {WINDOW_SIZE}x{WINDOW_SIZE} window")


def _window_stats(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gaussian-window moments (mu_x, mu_y, mu_xx, mu_yy, mu_xy) over all
    valid window positions, shape (C, 5, hv, wv)."""
    h, w, nc = x.shape
    planes = np.empty((5 * nc, h, w))
    _raster.ssim_pack_planes(x, y, planes)
    hv, wv = h - WINDOW_SIZE + 1, w - WINDOW_SIZE + 1
    stats = np.empty((5 * nc, hv, wv))
    _raster.sep_corr_valid(planes, _KERNEL, stats)
    return stats.reshape(nc, 5, hv, wv)


def ssim(x: ImageF, y: ImageF) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), windows fully
    inside the image, per channel and averaged."""
    _check_dims(x, y)
    _require_window(x)
    stats = _window_stats(x.data, y.data)
    nc, _, hv, wv = stats.shape
    s = np.empty((nc, hv, wv))
    g = np.empty((nc, 3, hv, wv))
    return float(_raster.ssim_terms_from_stats(stats, C1, C2, 0.0, s, g))


def ssim_with_gradient(x: ImageF, y: ImageF) -> tuple[float, np.ndarray]:
    """Mean SSIM and its gradient with respect to every sample of x."""
    _check_dims(x, y)
    _require_window(x)
    h, w, nc = x.data.shape
    stats = _window_stats(x.data, y.data)
    hv, wv = stats.shape[2], stats.shape[3]
    s = np.empty((nc, hv, wv))
    g = np.empty((nc, 3, hv, wv))
    mean_s = float(_raster.ssim_terms_from_stats(
        stats, C1, C2, 1.0 / (nc * hv * wv), s, g))
    adj = np.empty((3 * nc, h, w))
    _raster.sep_corr_adjoint(g.reshape(3 * nc, hv, wv), _KERNEL, adj)
    grad = np.empty_like(x.data)
    _raster.ssim_grad_assemble(x.data, y.data, adj, grad)
    return mean_s, grad


def total_loss(c: ImageF, im: ImageF, cfg: LossConfig,
               phi: WeightMap | None = None) -> tuple[float, ImageF]:
    """(1-lam) * L1 + lam * dssim_scale * (1 - SSIM) and dL/dc.

    For the "eggs" variant the precomputed weight map of ``im`` is
    required and multiplies the L1 residual; with an all-ones map the
    result is bit-identical to the baseline.  The L1 subgradient at zero
    residual is 0, so a perfect render is a stationary point.
    """
    _check_dims(c, im)
    if cfg.variant == "eggs":
        if phi is None:
            raise ConfigurationError("edge-weighted loss needs the image's weight map")
        if (phi.height, phi.width) != (im.height, im.width):
            raise DimensionMismatchError("weight map does not match images")

    diff = c.data - im.data
    n = diff.size
    sign = np.sign(diff)
    if cfg.variant == "eggs":
        l1 = float(np.mean(phi.data[:, :, None] * np.abs(diff)))
        grad = (1.0 - cfg.lam) * (phi.data[:, :, None] * sign) / n
    else:
        l1 = float(np.mean(np.abs(diff)))
        grad = (1.0 - cfg.lam) * sign / n

    loss = (1.0 - cfg.lam) * l1
    if cfg.lam > 0.0:
        s, ds = ssim_with_gradient(c, im)
        loss += cfg.lam * cfg.dssim_scale * (1.0 - s)
        grad = grad - cfg.lam * cfg.dssim_scale * ds
    return loss, ImageF(grad)
