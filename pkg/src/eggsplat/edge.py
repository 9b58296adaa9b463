"""Edge-guidance weight maps.

The weight of a pixel is 1 + beta * ||grad im||_p, so edge pixels weigh
more than flat ones and beta = 0 reduces to uniform weighting exactly.
Maps depend only on the input image, never on particle state, so they are
computed once per image at dataset load and cached.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ImageF
from .errors import EmptyInputError

# Rec.601 luma coefficients for RGB reduction.
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class WeightMap:
    """Per-pixel loss weights, (H, W) float64, every value finite and >= 1."""

    data: np.ndarray

    def __post_init__(self):
        a = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(f"weight map must be 2D and non-empty, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("weight map contains non-finite values")
        if np.min(a) < 1.0:
            raise ValueError("weight map values must be >= 1")
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class EdgeConfig:
    """Parameters of the edge indicator.

    beta scales the gradient magnitude; p_norm selects the l1 or l2 norm
    of (gx, gy); gradient_scheme is "central" or "sobel"; channel_mode is
    "luma" (reduce to Rec.601 luma before differentiating) or
    "max_channel" (keep, per pixel, the channel with the largest gradient).
    """

    beta: float = 2.0
    p_norm: int = 2
    gradient_scheme: str = "central"
    channel_mode: str = "luma"

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta < 0:
            raise ValueError("beta must be finite and >= 0")
        if self.p_norm not in (1, 2):
            raise ValueError("p_norm must be 1 or 2")
        if self.gradient_scheme not in ("central", "sobel"):
            raise ValueError("gradient_scheme must be 'central' or 'sobel'")
        if self.channel_mode not in ("luma", "max_channel"):
            raise ValueError("channel_mode must be 'luma' or 'max_channel'")


def _replicate_pad(a: np.ndarray) -> np.ndarray:
    return np.pad(a, 1, mode="edge")


def _central(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = _replicate_pad(a)
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    return gx, gy

# Sobel kernels normalized by 1/8 so a unit ramp yields unit gradient.
_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64) / 8.0


def _sobel(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = _replicate_pad(a)
    h, w = a.shape
    gx = np.zeros_like(a)
    gy = np.zeros_like(a)
    for di in range(3):
        for dj in range(3):
            win = p[di:di + h, dj:dj + w]
            gx += _SOBEL_X[di, dj] * win
            gy += _SOBEL_X[dj, di] * win
    return gx, gy


def image_gradient(im: ImageF, scheme: str = "central",
                   channel_mode: str = "luma") -> tuple[ImageF, ImageF]:
    """Discrete gradient (gx, gy) of an image, replicate boundary.

    Color inputs are reduced per ``channel_mode`` first; the result is
    single-channel either way.  Constant images give exactly zero.
    """
    if im.width == 0 or im.height == 0:
        raise EmptyInputError("cannot differentiate a zero-sized image")
    op = _central if scheme == "central" else _sobel
    if im.channels == 1:
        gx, gy = op(im.data[:, :, 0])
    elif channel_mode == "luma":
        gx, gy = op(im.data @ _LUMA)
    else:
        gxs = np.empty_like(im.data)
        gys = np.empty_like(im.data)
        for c in range(3):
            gxs[:, :, c], gys[:, :, c] = op(im.data[:, :, c])
        pick = np.argmax(gxs * gxs + gys * gys, axis=2)
        gx = np.take_along_axis(gxs, pick[:, :, None], axis=2)[:, :, 0]
        gy = np.take_along_axis(gys, pick[:, :, None], axis=2)[:, :, 0]
    return ImageF(gx), ImageF(gy)


def edge_weight_map(im: ImageF, cfg: EdgeConfig = EdgeConfig()) -> WeightMap:
    """Pointwise 1 + beta * ||(gx, gy)||_p; all-ones (bit-exact) for beta 0."""
    gx, gy = image_gradient(im, cfg.gradient_scheme, cfg.channel_mode)
    gx = gx.data[:, :, 0]
    gy = gy.data[:, :, 0]
    if cfg.beta == 0.0:
        return WeightMap(np.ones_like(gx))
    if cfg.p_norm == 1:
        mag = np.abs(gx) + np.abs(gy)
    else:
        mag = np.sqrt(gx * gx + gy * gy)
    return WeightMap(1.0 + cfg.beta * mag)


def scale_for_display(w: WeightMap) -> ImageF:
    """Affine map of [min, max] onto [0, 1]; constant maps become zeros."""
    lo = float(np.min(w.data))
    hi = float(np.max(w.data))
    if hi == lo:
        return ImageF(np.zeros_like(w.data))
    return ImageF((w.data - lo) / (hi - lo))
