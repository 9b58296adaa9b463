"""Fit isotropic Gaussian particles to a single image.

The reconstruction is fhat(x) = sum_k A_k * exp(-||x - tau_k||^2 / h_k^2)
evaluated at pixel centers, optimized under a plain or edge-weighted
squared-error distance with hand-derived gradients.  Everything here is
dense float64 numpy; grids are desk-scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import H_MIN, Field2D, ImageF, Particle2D
from .edge import EdgeConfig, WeightMap, edge_weight_map
from .errors import DimensionMismatchError, InvalidBandwidthError, InvalidParticleError

_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8


@dataclass(frozen=True)
class Fit2DConfig:
    """Optimizer setup for a 2D particle fit.

    loss_variant "l2" is the plain half squared error; "l2_edge_weighted"
    multiplies residuals by the edge map of the target before squaring.
    """

    particle_count: int = 100
    iterations: int = 2000
    lr_amplitude: float = 2e-2
    lr_center: float = 2e-1
    lr_bandwidth: float = 1e-1
    loss_variant: str = "l2"
    edge: EdgeConfig = field(default_factory=EdgeConfig)
    seed: int = 0
    eval_interval: int = 100

    def __post_init__(self):
        if self.particle_count < 1:
            raise ValueError("particle_count must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if min(self.lr_amplitude, self.lr_center, self.lr_bandwidth) <= 0:
            raise ValueError("learning rates must be positive")
        if self.loss_variant not in ("l2", "l2_edge_weighted"):
            raise ValueError("loss_variant must be 'l2' or 'l2_edge_weighted'")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")


def kernel2d(offset, h: float) -> float:
    """Unnormalized isotropic Gaussian exp(-||offset||^2 / h^2)."""
    if h < H_MIN:
        raise InvalidBandwidthError(f"bandwidth {h} below floor {H_MIN}")
    o = np.asarray(offset, dtype=np.float64)
    return float(np.exp(-(o @ o) / (h * h)))


def _check_particles(particles: list[Particle2D]) -> None:
    for i, p in enumerate(particles):
        if p.bandwidth < H_MIN:
            raise InvalidBandwidthError(
                f"particle {i}: bandwidth {p.bandwidth} below floor {H_MIN}")


def _stack(particles: list[Particle2D]):
    amps = np.stack([p.amplitude for p in particles])      # (K, 3)
    centers = np.stack([p.center for p in particles])      # (K, 2)
    bands = np.array([p.bandwidth for p in particles])     # (K,)
    return amps, centers, bands


def _grid(width: int, height: int) -> np.ndarray:
    """Pixel-center coordinates, shape (H*W, 2), (x, y) with x = column."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def _kernel_matrix(centers: np.ndarray, bands: np.ndarray,
                   width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Kernel values W (H*W, K) and squared distances (H*W, K)."""
    g = _grid(width, height)
    d = g[:, None, :] - centers[None, :, :]
    d2 = np.einsum("pkc,pkc->pk", d, d)
    return np.exp(-d2 / (bands * bands)[None, :]), d2


def reconstruct(particles: list[Particle2D], width: int, height: int) -> Field2D:
    """Sum of all particle kernels at every pixel center, (H, W, 3)."""
    if not particles:
        return Field2D(np.zeros((height, width, 3)))
    _check_particles(particles)
    amps, centers, bands = _stack(particles)
    w, _ = _kernel_matrix(centers, bands, width, height)
    return Field2D((w @ amps).reshape(height, width, 3))


def l2_distance(f: ImageF, fhat: Field2D, phi: WeightMap | None = None) -> float:
    """Half squared error, summed over pixels and channels.

    With a weight map the residual is multiplied by phi before squaring,
    so the weights enter the sum squared.
    """
    if f.data.shape != fhat.data.shape:
        raise DimensionMismatchError(
            f"image {f.data.shape} vs reconstruction {fhat.data.shape}")
    diff = f.data - fhat.data
    if phi is not None:
        if (phi.height, phi.width) != (f.height, f.width):
            raise DimensionMismatchError(
                f"weight map {(phi.height, phi.width)} vs image {(f.height, f.width)}")
        diff = phi.data[:, :, None] * diff
    return float(0.5 * np.sum(diff * diff))


def gradients2d(particles: list[Particle2D], f: ImageF,
                phi: WeightMap | None = None
                ) -> list[tuple[np.ndarray, np.ndarray, float]]:
    """Analytic gradients of the (weighted) distance for every particle.

    Returns per particle (dL/dA (3,), dL/dtau (2,), dL/dh).  The residual
    is shared across particles; each particle's gradient involves only its
    own kernel term, accumulated over the pixel grid.
    """
    _check_particles(particles)
    amps, centers, bands = _stack(particles)
    height, width = f.height, f.width
    w, d2 = _kernel_matrix(centers, bands, width, height)
    resid = (w @ amps) - f.data.reshape(-1, 3)           # fhat - f, (P, 3)
    if phi is not None:
        if (phi.height, phi.width) != (height, width):
            raise DimensionMismatchError("weight map does not match image")
        resid = (phi.data.reshape(-1) ** 2)[:, None] * resid

    g_amp = w.T @ resid                                   # (K, 3)
    # Shared pixel factor: sum over channels of resid * A_k, times kernel.
    ra = resid @ amps.T                                   # (P, K)
    raw = ra * w
    grid = _grid(width, height)
    diff = grid[:, None, :] - centers[None, :, :]         # (P, K, 2), x - tau
    inv_h2 = 1.0 / (bands * bands)
    g_center = 2.0 * inv_h2[:, None] * np.einsum("pk,pkc->kc", raw, diff)
    g_band = (2.0 / bands ** 3) * np.einsum("pk,pk->k", raw, d2)
    return [(g_amp[k], g_center[k], float(g_band[k])) for k in range(len(particles))]


def _loss_and_grads(amps, centers, bands, target_flat, weight_flat, width, height):
    """Fused loss + gradient evaluation on stacked parameter arrays."""
    w, d2 = _kernel_matrix(centers, bands, width, height)
    resid = (w @ amps) - target_flat
    wr = resid if weight_flat is None else weight_flat[:, None] * resid
    loss = 0.5 * float(np.sum(wr * resid)) if weight_flat is not None \
        else 0.5 * float(np.sum(resid * resid))
    g_amp = w.T @ wr
    raw = (wr @ amps.T) * w
    grid = _grid(width, height)
    diff = grid[:, None, :] - centers[None, :, :]
    inv_h2 = 1.0 / (bands * bands)
    g_center = 2.0 * inv_h2[:, None] * np.einsum("pk,pkc->kc", raw, diff)
    g_band = (2.0 / bands ** 3) * np.einsum("pk,pk->k", raw, d2)
    return loss, g_amp, g_center, g_band


def init_particles2d(target: ImageF, count: int, rng: np.random.Generator) -> list[Particle2D]:
    """Scale-aware default init: uniform centers, target-sampled amplitudes,
    bandwidth = image diagonal / sqrt(count)."""
    width, height = target.width, target.height
    h0 = max(float(np.hypot(width, height)) / np.sqrt(count), H_MIN)
    xs = rng.uniform(0.0, width - 1.0, size=count)
    ys = rng.uniform(0.0, height - 1.0, size=count)
    out = []
    for k in range(count):
        amp = target.data[int(round(ys[k])), int(round(xs[k]))]
        if target.channels == 1:
            amp = np.repeat(amp, 3)
        out.append(Particle2D(amp.copy(), np.array([xs[k], ys[k]]), h0))
    return out


def fit2d(target: ImageF, cfg: Fit2DConfig,
          init: list[Particle2D] | None = None
          ) -> tuple[list[Particle2D], list[tuple[int, float, float, float]]]:
    """Adam-optimize particle parameters against a target image.

    Returns the final particles and a history of
    (iteration, loss, psnr, edge_psnr) rows, one per eval interval plus
    the initial and final states.  Deterministic for a fixed seed.
    """
    from .metrics import default_edge_threshold, edge_region_psnr, psnr

    if target.channels == 1:
        target = ImageF(np.repeat(target.data, 3, axis=2))
    width, height = target.width, target.height
    rng = np.random.default_rng(cfg.seed)
    particles = init_particles2d(target, cfg.particle_count, rng) if init is None else list(init)
    _check_particles(particles)
    amps, centers, bands = _stack(particles)

    phi = edge_weight_map(target, cfg.edge)
    weight_flat = None
    if cfg.loss_variant == "l2_edge_weighted":
        weight_flat = (phi.data ** 2).reshape(-1)
    edge_thresh = default_edge_threshold(phi)
    target_flat = target.data.reshape(-1, 3)

    m = [np.zeros_like(amps), np.zeros_like(centers), np.zeros_like(bands)]
    v = [np.zeros_like(amps), np.zeros_like(centers), np.zeros_like(bands)]
    lrs = (cfg.lr_amplitude, cfg.lr_center, cfg.lr_bandwidth)

    history: list[tuple[int, float, float, float]] = []

    def record(it: int, loss: float):
        recon = ImageF(np.clip((_kernel_matrix(centers, bands, width, height)[0] @ amps)
                               .reshape(height, width, 3), 0.0, 1.0))
        e = edge_region_psnr(target, recon, phi, edge_thresh) if edge_thresh > 1.0 else float("nan")
        history.append((it, loss, psnr(target, recon), e))

    loss, g_amp, g_center, g_band = _loss_and_grads(
        amps, centers, bands, target_flat, weight_flat, width, height)
    record(0, loss)

    for it in range(1, cfg.iterations + 1):
        grads = (g_amp, g_center, g_band)
        params = (amps, centers, bands)
        corr1 = 1.0 - _ADAM_B1 ** it
        corr2 = 1.0 - _ADAM_B2 ** it
        for j in range(3):
            m[j] = _ADAM_B1 * m[j] + (1.0 - _ADAM_B1) * grads[j]
            v[j] = _ADAM_B2 * v[j] + (1.0 - _ADAM_B2) * grads[j] ** 2
            params[j][...] -= lrs[j] * (m[j] / corr1) / (np.sqrt(v[j] / corr2) + _ADAM_EPS)
        np.clip(bands, H_MIN, None, out=bands)

        loss, g_amp, g_center, g_band = _loss_and_grads(
            amps, centers, bands, target_flat, weight_flat, width, height)
        if not np.isfinite(loss):
            raise InvalidParticleError(f"iteration {it}: non-finite loss (diverged fit)")
        if it % cfg.eval_interval == 0 or it == cfg.iterations:
            record(it, loss)

    final = [Particle2D(amps[k].copy(), centers[k].copy(), float(bands[k]))
             for k in range(len(particles))]
    return final, history
