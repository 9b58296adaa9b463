"""3D optimization loop: Adam steps per view, density control, evaluation.

The loop is sequential and fully deterministic for a fixed seed: views are
visited in seeded epoch shuffles, density-control sampling draws from the
run's single generator, and all arithmetic is float64.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .core import GaussianScene, logistic, logit
from .errors import InternalError
from .io import Checkpoint, View
from .loss import LossConfig, ssim, total_loss
from .metrics import (EvalRecord, default_edge_threshold, edge_region_psnr,
                      particle_edge_alignment, psnr)
from .render import (RenderConfig, RenderGrads, rasterize, rasterize_backward,
                     rasterize_with_cache)

PARAM_GROUPS = ("position", "log_scale", "rotation", "opacity_logit", "color")

_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8


@dataclass(frozen=True)
class DensifyConfig:
    """Adaptive density control schedule and thresholds.

    ``grad_threshold``, ``stop_iter`` and ``split_scale_threshold`` may be
    None, in which case the training loop fills them in from the image
    width, the iteration budget, and the scene extent respectively.
    ``opacity_reset_interval`` must be a multiple of ``interval`` (resets
    piggyback on density-control events).
    """

    enabled: bool = True
    interval: int = 100
    start_iter: int = 500
    stop_iter: int | None = None
    grad_threshold: float | None = None
    split_scale_threshold: float | None = None
    prune_opacity: float = 0.005
    opacity_reset_interval: int = 1000
    split_factor: float = 1.6
    max_particles: int | None = None


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    loss: LossConfig = field(default_factory=LossConfig)
    lr_position_init: float | None = None    # default 1.6e-4 * scene extent
    lr_position_final: float | None = None   # default lr_position_init / 100
    lr_log_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 1e-2
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    eval_interval: int = 250
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")


@dataclass
class OptimState:
    """Adam moments, index-aligned with the particle arrays at all times."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, k: int) -> "OptimState":
        shapes = {"position": (k, 3), "log_scale": (k, 3), "rotation": (k, 4),
                  "opacity_logit": (k,), "color": (k, 3)}
        return cls({g: np.zeros(s) for g, s in shapes.items()},
                   {g: np.zeros(s) for g, s in shapes.items()})

    def check_aligned(self, k: int) -> None:
        for g in PARAM_GROUPS:
            if len(self.m[g]) != k or len(self.v[g]) != k:
                raise InternalError(f"optimizer moments misaligned for group {g}")


def adam_step(scene: GaussianScene, grads: dict[str, np.ndarray],
              state: OptimState, lrs: dict[str, float]) -> None:
    """One Adam update per parameter group, in place; renormalizes rotations."""
    params = {"position": scene.positions, "log_scale": scene.log_scales,
              "rotation": scene.rotations, "opacity_logit": scene.opacity_logits,
              "color": scene.colors}
    state.step += 1
    c1 = 1.0 - _ADAM_B1 ** state.step
    c2 = 1.0 - _ADAM_B2 ** state.step
    for g in PARAM_GROUPS:
        grad = grads[g]
        if grad.shape != params[g].shape:
            raise InternalError(f"gradient shape mismatch for group {g}")
        state.m[g] = _ADAM_B1 * state.m[g] + (1.0 - _ADAM_B1) * grad
        state.v[g] = _ADAM_B2 * state.v[g] + (1.0 - _ADAM_B2) * grad * grad
        params[g][...] -= lrs[g] * (state.m[g] / c1) / (np.sqrt(state.v[g] / c2) + _ADAM_EPS)
    norms = np.linalg.norm(scene.rotations, axis=1, keepdims=True)
    scene.rotations /= norms


@dataclass
class DensifyStats:
    """Running mean of screen-space positional gradient norms per particle."""

    norm_sum: np.ndarray
    world_grad_sum: np.ndarray
    seen_count: np.ndarray

    @classmethod
    def zeros(cls, k: int) -> "DensifyStats":
        return cls(np.zeros(k), np.zeros((k, 3)), np.zeros(k, dtype=np.int64))

    def mean_norm(self) -> np.ndarray:
        return self.norm_sum / np.maximum(self.seen_count, 1)

    def mean_world_grad(self) -> np.ndarray:
        return self.world_grad_sum / np.maximum(self.seen_count, 1)[:, None]


def accumulate_densify_stats(stats: DensifyStats, grads: RenderGrads) -> None:
    """Fold one view's gradients in; unseen particles contribute nothing."""
    seen = grads.contrib_count > 0
    stats.norm_sum[seen] += np.linalg.norm(grads.mean2d[seen], axis=1)
    stats.world_grad_sum[seen] += grads.position[seen]
    stats.seen_count[seen] += 1


@dataclass(frozen=True)
class DensifyEvent:
    iteration: int
    cloned: int
    split: int
    pruned: int
    opacity_reset: bool
    particle_count: int


def density_control(scene: GaussianScene, stats: DensifyStats, optim: OptimState,
                    cfg: DensifyConfig, iteration: int, rng: np.random.Generator,
                    position_lr: float) -> tuple[GaussianScene, OptimState, DensifyEvent]:
    """Clone small / split large high-gradient particles, prune transparent
    ones, and periodically reset opacities.

    Clones are offset by one positional-gradient descent step; split
    children sample their positions from the parent gaussian with the
    run's generator and shrink scales by the split factor.  New particles
    get zeroed Adam moments; moment arrays stay index-aligned throughout.
    """
    if cfg.grad_threshold is None or cfg.split_scale_threshold is None:
        raise ValueError("density control thresholds must be resolved")
    k = len(scene)
    mean_norm = stats.mean_norm()
    max_scale = np.max(np.exp(scene.log_scales), axis=1)
    candidates = mean_norm > cfg.grad_threshold

    if cfg.max_particles is not None:
        # Splitting replaces one particle by two, cloning adds one: either
        # way each candidate grows the scene by one.  Keep the strongest.
        budget = max(cfg.max_particles - k, 0)
        n_cand = int(np.sum(candidates))
        if n_cand > budget:
            ranked = np.lexsort((np.arange(k), -mean_norm))
            allowed = np.zeros(k, dtype=bool)
            picked = 0
            for i in ranked:
                if picked >= budget:
                    break
                if candidates[i]:
                    allowed[i] = True
                    picked += 1
            candidates = allowed

    clone_mask = candidates & (max_scale < cfg.split_scale_threshold)
    split_mask = candidates & ~clone_mask
    prune_mask = logistic(scene.opacity_logits) < cfg.prune_opacity

    keep = ~(split_mask | prune_mask)
    clone_idx = np.nonzero(clone_mask & ~prune_mask)[0]
    split_idx = np.nonzero(split_mask & ~prune_mask)[0]

    parts = {g: [] for g in PARAM_GROUPS}
    arrays = {"position": scene.positions, "log_scale": scene.log_scales,
              "rotation": scene.rotations, "opacity_logit": scene.opacity_logits,
              "color": scene.colors}
    for g in PARAM_GROUPS:
        parts[g].append(arrays[g][keep])

    if len(clone_idx):
        offset = -position_lr * stats.mean_world_grad()[clone_idx]
        parts["position"].append(scene.positions[clone_idx] + offset)
        for g in ("log_scale", "rotation", "opacity_logit", "color"):
            parts[g].append(arrays[g][clone_idx])

    n_children = 0
    if len(split_idx):
        from .core import quat_to_matrix
        parents = split_idx
        n_children = 2 * len(parents)
        scales = np.exp(scene.log_scales[parents])
        rots = quat_to_matrix(scene.rotations[parents])
        z = rng.standard_normal((len(parents), 2, 3))
        local = scales[:, None, :] * z
        world = np.einsum("nij,ncj->nci", rots, local)
        child_pos = (scene.positions[parents][:, None, :] + world).reshape(-1, 3)
        child_logs = np.repeat(scene.log_scales[parents] - np.log(cfg.split_factor),
                               2, axis=0)
        parts["position"].append(child_pos)
        parts["log_scale"].append(child_logs)
        parts["rotation"].append(np.repeat(scene.rotations[parents], 2, axis=0))
        parts["opacity_logit"].append(np.repeat(scene.opacity_logits[parents], 2))
        parts["color"].append(np.repeat(scene.colors[parents], 2, axis=0))

    new_scene = GaussianScene(
        np.concatenate(parts["position"]),
        np.concatenate(parts["log_scale"]),
        np.concatenate(parts["rotation"]),
        np.concatenate(parts["opacity_logit"]),
        np.concatenate(parts["color"]),
    )
    new_k = len(new_scene)
    if new_k == 0:
        raise InternalError(f"scene empty after pruning at iteration {iteration}")

    new_optim = OptimState.zeros(new_k)
    new_optim.step = optim.step
    n_kept = int(np.sum(keep))
    for g in PARAM_GROUPS:
        new_optim.m[g][:n_kept] = optim.m[g][keep]
        new_optim.v[g][:n_kept] = optim.v[g][keep]

    reset = cfg.opacity_reset_interval > 0 and iteration % cfg.opacity_reset_interval == 0
    if reset:
        new_scene.opacity_logits[...] = logit(0.01)
        new_optim.m["opacity_logit"][...] = 0.0
        new_optim.v["opacity_logit"][...] = 0.0

    event = DensifyEvent(iteration, len(clone_idx), len(split_idx),
                         int(np.sum(prune_mask)), reset, new_k)
    new_optim.check_aligned(new_k)
    return new_scene, new_optim, event


def _knn_scales(positions: np.ndarray, fallback: float) -> np.ndarray:
    k = len(positions)
    if k < 2:
        return np.full(k, fallback)
    kq = min(4, k)
    dists, _ = cKDTree(positions).query(positions, k=kq)
    mean = np.mean(dists[:, 1:], axis=1)
    mean[~(mean > 0)] = fallback
    return mean


def init_scene_from_points(positions: np.ndarray,
                           colors: np.ndarray | None = None,
                           fallback_scale: float | None = None) -> GaussianScene:
    """Particles at the given points: point colors (or mid-gray), opacity
    0.1, identity rotation, isotropic scale from 3-nearest-neighbor spacing."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    k = len(positions)
    if k == 0:
        raise ValueError("need at least one point")
    if fallback_scale is None:
        diag = float(np.linalg.norm(np.ptp(positions, axis=0))) if k > 1 else 0.0
        fallback_scale = diag / 10.0 if diag > 0 else 0.1
    scales = _knn_scales(positions, fallback_scale)
    rot = np.zeros((k, 4))
    rot[:, 0] = 1.0
    cols = np.full((k, 3), 0.5) if colors is None \
        else np.clip(np.asarray(colors, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
    return GaussianScene(positions, np.log(scales)[:, None].repeat(3, axis=1),
                         rot, np.full(k, logit(0.1)), cols)


def init_scene_random(n: int, bounds_min, bounds_max,
                      rng: np.random.Generator) -> GaussianScene:
    """Uniform positions inside the box, then the same defaults as the
    point-cloud init; single particles fall back to diagonal/10 scale."""
    if n < 1:
        raise ValueError("need at least one particle")
    lo = np.asarray(bounds_min, dtype=np.float64).reshape(3)
    hi = np.asarray(bounds_max, dtype=np.float64).reshape(3)
    positions = rng.uniform(lo, hi, size=(n, 3))
    diag = float(np.linalg.norm(hi - lo))
    return init_scene_from_points(positions, None,
                                  fallback_scale=diag / 10.0 if diag > 0 else 0.1)


def _scene_extent(scene: GaussianScene) -> float:
    if len(scene) < 2:
        return 1.0
    return max(float(0.5 * np.linalg.norm(np.ptp(scene.positions, axis=0))), 1e-6)


def resolve_config(cfg: TrainConfig, scene: GaussianScene,
                   image_width: int) -> TrainConfig:
    """Fill None defaults from scene extent, image width, and budget."""
    extent = _scene_extent(scene)
    lr_init = cfg.lr_position_init if cfg.lr_position_init is not None \
        else 1.6e-4 * extent
    lr_final = cfg.lr_position_final if cfg.lr_position_final is not None \
        else lr_init / 100.0
    d = cfg.densify
    d = replace(
        d,
        stop_iter=d.stop_iter if d.stop_iter is not None else cfg.iterations // 2,
        grad_threshold=d.grad_threshold if d.grad_threshold is not None
        else 2e-4 * (image_width / 980.0),
        split_scale_threshold=d.split_scale_threshold
        if d.split_scale_threshold is not None else 0.01 * extent,
    )
    return replace(cfg, lr_position_init=lr_init, lr_position_final=lr_final,
                   densify=d)


def evaluate(scene: GaussianScene, views: list[View], rcfg: RenderConfig,
             iteration: int, wall_ms: float) -> EvalRecord:
    """Mean metrics over all views at the current state."""
    psnrs, ssims, edges, aligns = [], [], [], []
    for view in views:
        out = rasterize(scene, view.camera, rcfg)
        from .core import ImageF
        clipped = ImageF(np.clip(out.color.data, 0.0, 1.0))
        psnrs.append(psnr(view.image, clipped))
        ssims.append(ssim(view.image, clipped))
        thr = default_edge_threshold(view.phi)
        if thr > 1.0:
            edges.append(edge_region_psnr(view.image, clipped, view.phi, thr))
        aligns.append(particle_edge_alignment(scene, view.camera, view.phi))
    finite_edges = [e for e in edges if not np.isnan(e)]
    return EvalRecord(
        iteration=iteration,
        psnr=float(np.mean(psnrs)),
        ssim=float(np.mean(ssims)),
        edge_psnr=float(np.mean(finite_edges)) if finite_edges else float("nan"),
        particle_count=len(scene),
        particle_edge_alignment=float(np.mean(aligns)),
        wall_time_ms=wall_ms,
    )


def train(views: list[View], init_scene: GaussianScene, cfg: TrainConfig,
          events_out: list | None = None,
          iter_times_out: list | None = None) -> tuple[Checkpoint, list[EvalRecord]]:
    """Run the full optimization; deterministic given config and seed.

    ``events_out`` collects DensifyEvent entries, ``iter_times_out``
    per-iteration wall times in ms (optimization work only, no eval).
    """
    if not views:
        raise ValueError("need at least one view")
    scene = init_scene.copy()
    cfg = resolve_config(cfg, scene, views[0].camera.width)
    rng = np.random.default_rng(cfg.seed)
    state = OptimState.zeros(len(scene))
    stats = DensifyStats.zeros(len(scene))
    rcfg = RenderConfig(background=np.asarray(cfg.background, dtype=np.float64))
    records: list[EvalRecord] = []
    dcfg = cfg.densify

    start = time.perf_counter()

    def wall_ms() -> float:
        return (time.perf_counter() - start) * 1e3

    if cfg.iterations == 0:
        records.append(evaluate(scene, views, rcfg, 0, wall_ms()))

    order: np.ndarray = np.zeros(0, dtype=np.int64)
    cursor = 0
    for it in range(1, cfg.iterations + 1):
        t_iter = time.perf_counter()
        if cursor >= len(order):
            order = rng.permutation(len(views))
            cursor = 0
        view = views[order[cursor]]
        cursor += 1

        frac = it / cfg.iterations
        pos_lr = cfg.lr_position_init * (cfg.lr_position_final / cfg.lr_position_init) ** frac
        lrs = {"position": pos_lr, "log_scale": cfg.lr_log_scale,
               "rotation": cfg.lr_rotation, "opacity_logit": cfg.lr_opacity,
               "color": cfg.lr_color}

        out, cache = rasterize_with_cache(scene, view.camera, rcfg)
        loss_val, dldc = total_loss(out.color, view.image, cfg.loss, phi=view.phi)
        if not np.isfinite(loss_val):
            raise InternalError(f"iteration {it}: non-finite loss")
        grads = rasterize_backward(scene, view.camera, rcfg, dldc, cache=cache)
        accumulate_densify_stats(stats, grads)
        adam_step(scene, {"position": grads.position, "log_scale": grads.log_scale,
                          "rotation": grads.rotation,
                          "opacity_logit": grads.opacity_logit,
                          "color": grads.color}, state, lrs)
        np.clip(scene.colors, 0.0, 1.0, out=scene.colors)

        if (dcfg.enabled and it % dcfg.interval == 0
                and dcfg.start_iter <= it <= dcfg.stop_iter):
            scene, state, event = density_control(scene, stats, state, dcfg,
                                                  it, rng, pos_lr)
            stats = DensifyStats.zeros(len(scene))
            if events_out is not None:
                events_out.append(event)

        if iter_times_out is not None:
            iter_times_out.append((time.perf_counter() - t_iter) * 1e3)

        if it % cfg.eval_interval == 0 or it == cfg.iterations:
            records.append(evaluate(scene, views, rcfg, it, wall_ms()))

    echo = config_echo(cfg)
    ckpt = Checkpoint(cfg.iterations, scene, echo,
                      rng_state=_jsonable(rng.bit_generator.state))
    return ckpt, records


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def config_echo(cfg: TrainConfig) -> dict:
    """JSON-friendly dump of the effective configuration."""
    from dataclasses import asdict
    return _jsonable(asdict(cfg))
