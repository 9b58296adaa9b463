"""Quality and diagnostic metrics, CSV logging, PSNR-curve plots."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Camera, GaussianScene, ImageF
from .edge import WeightMap
from .errors import DimensionMismatchError

CSV_FIELDS = ("iteration", "psnr", "ssim", "edge_psnr", "particle_count",
              "alignment", "wall_time_ms")


@dataclass(frozen=True)
class EvalRecord:
    """One evaluation snapshot during training (means over views)."""

    iteration: int
    psnr: float
    ssim: float
    edge_psnr: float
    particle_count: int
    particle_edge_alignment: float
    wall_time_ms: float


def psnr(a: ImageF, b: ImageF) -> float:
    """10 log10(1 / MSE) for [0,1] images; +inf when identical."""
    if a.data.shape != b.data.shape:
        raise DimensionMismatchError(f"{a.data.shape} vs {b.data.shape}")
    mse = float(np.mean((a.data - b.data) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def default_edge_threshold(phi: WeightMap) -> float:
    """Scale-free split of edge vs flat pixels: halfway up the weight range."""
    return float(1.0 + 0.5 * (np.max(phi.data) - 1.0))


def edge_region_psnr(a: ImageF, b: ImageF, phi: WeightMap, threshold: float) -> float:
    """PSNR restricted to pixels with weight >= threshold (> 1 required).

    NaN sentinel when no pixel qualifies.
    """
    if threshold <= 1.0:
        raise ValueError("threshold must exceed 1 (use plain psnr otherwise)")
    if a.data.shape != b.data.shape:
        raise DimensionMismatchError(f"{a.data.shape} vs {b.data.shape}")
    mask = phi.data >= threshold
    if not np.any(mask):
        return float("nan")
    d = (a.data - b.data)[mask]
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def particle_edge_alignment(scene: GaussianScene, cam: Camera, phi: WeightMap) -> float:
    """How strongly particle centers sit on edge pixels, in [0, 1].

    Mean of (phi - 1) / (max phi - 1) sampled at the rounded projected
    centers of particles that land inside the image; 0 when the map is
    constant or nothing projects inside.
    """
    peak = float(np.max(phi.data))
    if peak <= 1.0 or len(scene) == 0:
        return 0.0
    t = scene.positions @ cam.rotation.T + cam.translation
    valid = t[:, 2] > 0.0
    if not np.any(valid):
        return 0.0
    t = t[valid]
    u = np.rint(cam.fx * t[:, 0] / t[:, 2] + cam.cx).astype(np.int64)
    v = np.rint(cam.fy * t[:, 1] / t[:, 2] + cam.cy).astype(np.int64)
    inside = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    if not np.any(inside):
        return 0.0
    vals = phi.data[v[inside], u[inside]]
    return float(np.mean((vals - 1.0) / (peak - 1.0)))


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".12g")


def write_metrics_csv(records: list[EvalRecord], path) -> None:
    """One header row plus one row per record, schema-ordered, deterministic."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for r in records:
            writer.writerow([_fmt(r.iteration), _fmt(r.psnr), _fmt(r.ssim),
                             _fmt(r.edge_psnr), _fmt(r.particle_count),
                             _fmt(r.particle_edge_alignment), _fmt(r.wall_time_ms)])


def read_metrics_csv(path) -> list[EvalRecord]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(EvalRecord(
                iteration=int(row["iteration"]),
                psnr=float(row["psnr"]),
                ssim=float(row["ssim"]),
                edge_psnr=float(row["edge_psnr"]),
                particle_count=int(row["particle_count"]),
                particle_edge_alignment=float(row["alignment"]),
                wall_time_ms=float(row["wall_time_ms"]),
            ))
    return out


def _smooth(values: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(values) < 2:
        return values
    window = min(window, len(values))
    kernel = np.ones(window) / window
    padded = np.concatenate([np.repeat(values[0], window - 1), values])
    return np.convolve(padded, kernel, mode="valid")


def plot_psnr_curves(csv_paths: list, labels: list[str], out_path,
                     smoothing_window: int = 50) -> None:
    """Vector line chart of PSNR vs iteration for several runs.

    Curves are moving-average smoothed; output bytes are deterministic
    for identical inputs (fixed hash salt, no timestamps).
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if len(csv_paths) != len(labels):
        raise ValueError("need one label per curve")
    with plt.rc_context({"svg.hashsalt": "eggsplat", "figure.figsize": (6, 4)}):
        fig, ax = plt.subplots()
        for path, label in zip(csv_paths, labels):
            records = read_metrics_csv(path)
            iters = np.array([r.iteration for r in records], dtype=float)
            vals = np.array([r.psnr for r in records], dtype=float)
            finite = np.isfinite(vals)
            ax.plot(iters[finite], _smooth(vals[finite], smoothing_window), label=label)
        ax.set_xlabel("iteration")
        ax.set_ylabel("PSNR (dB)")
        ax.legend()
        fig.savefig(out_path, format="svg", metadata={"Date": None})
        plt.close(fig)
