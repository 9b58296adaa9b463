"""Command-line interface: edge-map preview, 2D fitting, 3D training,
rendering, evaluation, A/B comparison, and fixture generation.

Exit codes: 0 success, 1 user error (bad flags or files), 2 internal
invariant violation.  All randomness sits behind --seed; reruns with
identical inputs and seed write byte-identical artifacts (timing columns
in metrics CSVs excepted).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as gsio
from .core import GaussianScene, ImageF
from .edge import EdgeConfig, edge_weight_map, scale_for_display
from .errors import EggsplatError, InternalError, UserInputError
from .fixtures import generate_scene
from .loss import LossConfig
from .metrics import (EvalRecord, default_edge_threshold, edge_region_psnr,
                      particle_edge_alignment, plot_psnr_curves, psnr,
                      write_metrics_csv)
from .render import RenderConfig, rasterize
from .splat2d import Fit2DConfig, fit2d, reconstruct
from .train import DensifyConfig, TrainConfig, config_echo, init_scene_from_points, \
    init_scene_random, train


class _CliArgumentError(UserInputError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _CliArgumentError(f"{self.prog}: {message}")


def _use_color() -> bool:
    return "NO_COLOR" not in os.environ and sys.stdout.isatty()


def _green(text: str) -> str:
    return f"\033[32m{text}\033[0m" if _use_color() else text


def _parse_background(text: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != 3:
        raise _CliArgumentError(f"--background must be r,g,b, got {text!r}")
    return np.array([float(p) for p in parts])


def _parse_seeds(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(p) for p in text.split(",")]


def build_parser() -> _Parser:
    parser = _Parser(prog="eggsplat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("edges", parser_class=_Parser,
                       help="write the display-scaled edge weight map of an image")
    p.add_argument("--input", required=True, help="input image (ppm/pgm/png)")
    p.add_argument("--out", required=True, help="output image path")
    p.add_argument("--beta", type=float, default=2.0, help="edge weight strength")
    p.add_argument("--p", type=int, choices=(1, 2), default=2, help="gradient norm")
    p.add_argument("--scheme", choices=("central", "sobel"), default="central",
                   help="gradient discretization")
    p.add_argument("--channel-mode", choices=("luma", "max_channel"), default="luma",
                   help="color reduction before differentiation")

    p = sub.add_parser("fit2d", parser_class=_Parser,
                       help="fit isotropic 2D particles to one image")
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--k", type=int, default=100, help="particle count")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--loss", choices=("l2", "eggs"), default="l2",
                   help="plain or edge-weighted squared error")
    p.add_argument("--beta", type=float, default=2.0)
    p.add_argument("--p", type=int, choices=(1, 2), default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-interval", type=int, default=100)

    p = sub.add_parser("train", parser_class=_Parser,
                       help="optimize a 3D particle scene against a multi-view dataset")
    _add_train_flags(p)

    p = sub.add_parser("render", parser_class=_Parser,
                       help="render a checkpoint from a manifest camera")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True, help="scene manifest (JSON)")
    p.add_argument("--camera-index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--background", default="0,0,0", help="r,g,b in [0,1]")

    p = sub.add_parser("eval", parser_class=_Parser,
                       help="compute metrics of a checkpoint against a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene-dir", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--beta", type=float, default=2.0)
    p.add_argument("--p", type=int, choices=(1, 2), default=2)
    p.add_argument("--background", default="0,0,0")

    p = sub.add_parser("compare", parser_class=_Parser,
                       help="A/B the baseline and edge-weighted losses over shared seeds")
    p.add_argument("--scene-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seeds", default="0..9", help="e.g. 0..9 or 0,3,7")
    p.add_argument("--iters", type=int, default=3000)
    p.add_argument("--beta", type=float, default=2.0)
    p.add_argument("--p", type=int, choices=(1, 2), default=2)
    p.add_argument("--lam", type=float, default=0.2, help="structural-term weight")
    p.add_argument("--config", help="training config JSON shared by both arms")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("gen-fixture", parser_class=_Parser,
                       help="write a synthetic multi-view scene with ground truth")
    p.add_argument("--kind", choices=("cube", "checkerboard"), default="cube")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--points", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _add_train_flags(p: _Parser) -> None:
    p.add_argument("--scene-dir", required=True, help="directory with scene.json")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="training config JSON (flags override it)")
    p.add_argument("--loss", choices=("baseline", "eggs"), default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--p", type=int, choices=(1, 2), default=None)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eval-interval", type=int, default=None)
    p.add_argument("--max-particles", type=int, default=None)
    p.add_argument("--no-densify", action="store_true")
    p.add_argument("--init", choices=("points", "random"), default="points",
                   help="particle initialization source")
    p.add_argument("--n-init", type=int, default=400,
                   help="particle count for --init random")
    p.add_argument("--background", default=None, help="r,g,b in [0,1]")
    p.add_argument("--threads", type=int, default=1)


def _config_from_json(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UserInputError(f"--config file not found: {p}")
    return json.loads(p.read_text())


def _build_train_config(args, overrides: dict | None = None) -> TrainConfig:
    """defaults < config file < CLI flags, in that precedence order."""
    doc = _config_from_json(getattr(args, "config", None))
    if overrides:
        doc = {**doc, **overrides}

    def pick(flag, key, default):
        v = getattr(args, flag, None)
        if v is not None:
            return v
        return doc.get(key, default)

    edge = EdgeConfig(beta=float(pick("beta", "beta", 2.0)),
                      p_norm=int(pick("p", "p_norm", 2)))
    loss = LossConfig(lam=float(pick("lam", "lam", 0.2)),
                      variant=str(pick("loss", "variant", "baseline")),
                      edge=edge)
    densify = DensifyConfig(
        enabled=not getattr(args, "no_densify", False) and doc.get("densify_enabled", True),
        interval=int(doc.get("densify_interval", 100)),
        start_iter=int(doc.get("densify_start", 500)),
        stop_iter=doc.get("densify_stop"),
        grad_threshold=doc.get("grad_threshold"),
        split_scale_threshold=doc.get("split_scale_threshold"),
        prune_opacity=float(doc.get("prune_opacity", 0.005)),
        opacity_reset_interval=int(doc.get("opacity_reset_interval", 1000)),
        max_particles=pick("max_particles", "max_particles", None),
    )
    bg_text = getattr(args, "background", None)
    background = tuple(_parse_background(bg_text)) if bg_text \
        else tuple(doc.get("background", (0.0, 0.0, 0.0)))
    return TrainConfig(
        iterations=int(pick("iters", "iterations", 3000)),
        loss=loss,
        lr_position_init=doc.get("lr_position_init"),
        lr_position_final=doc.get("lr_position_final"),
        lr_log_scale=float(doc.get("lr_log_scale", 5e-3)),
        lr_rotation=float(doc.get("lr_rotation", 1e-3)),
        lr_opacity=float(doc.get("lr_opacity", 5e-2)),
        lr_color=float(doc.get("lr_color", 1e-2)),
        densify=densify,
        eval_interval=int(pick("eval_interval", "eval_interval", 250)),
        seed=int(pick("seed", "seed", 0)),
        background=background,
    )


def _check_threads(args) -> None:
    threads = getattr(args, "threads", 1)
    if threads != 1:
        print("note: only --threads 1 is implemented; running single-threaded",
              file=sys.stderr)


def _init_scene_for(args, manifest, cfg: TrainConfig) -> GaussianScene:
    if args.init == "points" and manifest.points_path is not None:
        positions, colors = gsio.load_ply_points(manifest.points_path)
        return init_scene_from_points(positions, colors)
    if manifest.bounds is None:
        raise UserInputError("random init needs bounds in the manifest")
    rng = np.random.default_rng(cfg.seed)
    return init_scene_random(args.n_init, manifest.bounds[0], manifest.bounds[1], rng)


def _cmd_edges(args) -> int:
    img = gsio.load_image(args.input)
    cfg = EdgeConfig(beta=args.beta, p_norm=args.p, gradient_scheme=args.scheme,
                     channel_mode=args.channel_mode)
    gsio.save_image(scale_for_display(edge_weight_map(img, cfg)), args.out)
    return 0


def _write_history_csv(history, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "psnr", "edge_psnr"])
        for it, loss_v, psnr_v, edge_v in history:
            writer.writerow([it, format(loss_v, ".12g"), format(psnr_v, ".12g"),
                             format(edge_v, ".12g")])


def _cmd_fit2d(args) -> int:
    target = gsio.load_image(args.input)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = Fit2DConfig(
        particle_count=args.k, iterations=args.iters,
        loss_variant="l2" if args.loss == "l2" else "l2_edge_weighted",
        edge=EdgeConfig(beta=args.beta, p_norm=args.p),
        seed=args.seed, eval_interval=args.eval_interval)
    particles, history = fit2d(target, cfg)
    recon = reconstruct(particles, target.width, target.height)
    gsio.save_image(ImageF(np.clip(recon.data, 0.0, 1.0)), out_dir / "reconstruction.ppm")
    gsio.save_particles2d(particles, out_dir / "particles.p2d")
    _write_history_csv(history, out_dir / "history.csv")
    (out_dir / "effective_config.json").write_text(
        json.dumps({"particle_count": cfg.particle_count, "iterations": cfg.iterations,
                    "loss_variant": cfg.loss_variant, "beta": cfg.edge.beta,
                    "p_norm": cfg.edge.p_norm, "seed": cfg.seed}, indent=1))
    print(f"final loss {history[-1][1]:.6g}, psnr {history[-1][2]:.3f} dB")
    return 0


def _run_training(scene_dir: str, cfg: TrainConfig, args, out_dir: Path) -> None:
    manifest_path = Path(scene_dir) / "scene.json"
    manifest, views = gsio.load_manifest(manifest_path, cfg.loss.edge)
    init = _init_scene_for(args, manifest, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    events: list = []
    ckpt, records = train(views, init, cfg, events_out=events)
    gsio.save_checkpoint(ckpt, out_dir / "checkpoint.ckpt")
    write_metrics_csv(records, out_dir / "metrics.csv")
    with (out_dir / "events.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "cloned", "split", "pruned",
                         "opacity_reset", "particle_count"])
        for e in events:
            writer.writerow([e.iteration, e.cloned, e.split, e.pruned,
                             int(e.opacity_reset), e.particle_count])
    (out_dir / "effective_config.json").write_text(
        json.dumps(config_echo(cfg), indent=1, sort_keys=True))
    (out_dir / "state_hash.txt").write_text(ckpt.state_hash() + "\n")


def _cmd_train(args) -> int:
    cfg = _build_train_config(args)
    _check_threads(args)
    out_dir = Path(args.out_dir)
    _run_training(args.scene_dir, cfg, args, out_dir)
    hash_text = (out_dir / "state_hash.txt").read_text().strip()
    print(f"checkpoint state hash {hash_text}")
    return 0


def _cmd_render(args) -> int:
    ckpt = gsio.load_checkpoint(args.checkpoint)
    manifest = gsio.read_manifest(args.scene)
    if not 0 <= args.camera_index < len(manifest.views):
        raise UserInputError(
            f"--camera-index {args.camera_index} out of range "
            f"(manifest has {len(manifest.views)} views)")
    cam = manifest.views[args.camera_index].camera
    rcfg = RenderConfig(background=_parse_background(args.background))
    out = rasterize(ckpt.scene, cam, rcfg)
    gsio.save_image(ImageF(np.clip(out.color.data, 0.0, 1.0)), args.out)
    return 0


def _cmd_eval(args) -> int:
    ckpt = gsio.load_checkpoint(args.checkpoint)
    edge = EdgeConfig(beta=args.beta, p_norm=args.p)
    _, views = gsio.load_manifest(Path(args.scene_dir) / "scene.json", edge)
    rcfg = RenderConfig(background=_parse_background(args.background))
    records = []
    for i, view in enumerate(views):
        out = rasterize(ckpt.scene, view.camera, rcfg)
        clipped = ImageF(np.clip(out.color.data, 0.0, 1.0))
        from .loss import ssim as ssim_fn
        thr = default_edge_threshold(view.phi)
        e = edge_region_psnr(view.image, clipped, view.phi, thr) if thr > 1 else float("nan")
        records.append(EvalRecord(
            iteration=i, psnr=psnr(view.image, clipped),
            ssim=ssim_fn(view.image, clipped), edge_psnr=e,
            particle_count=len(ckpt.scene),
            particle_edge_alignment=particle_edge_alignment(ckpt.scene, view.camera,
                                                            view.phi),
            wall_time_ms=0.0))
    write_metrics_csv(records, args.out)
    mean_psnr = float(np.mean([r.psnr for r in records]))
    print(f"mean psnr over {len(records)} views: {mean_psnr:.3f} dB")
    return 0


def _cmd_compare(args) -> int:
    _check_threads(args)
    seeds = _parse_seeds(args.seeds)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    finals: dict[str, list[EvalRecord]] = {"baseline": [], "eggs": []}
    for variant in ("baseline", "eggs"):
        for seed in seeds:
            overrides = {"variant": variant, "seed": seed,
                         "iterations": args.iters, "beta": args.beta,
                         "p_norm": args.p, "lam": args.lam}
            cfg = _build_train_config(args, overrides)
            # Both arms always see the same weight maps; the baseline just
            # ignores them in the loss.
            cfg = replace(cfg, loss=replace(cfg.loss,
                                            edge=EdgeConfig(beta=args.beta, p_norm=args.p)))
            run_dir = out_dir / f"run_{variant}_seed{seed}"
            _run_training(args.scene_dir, cfg, args, run_dir)
            from .metrics import read_metrics_csv
            final = read_metrics_csv(run_dir / "metrics.csv")[-1]
            finals[variant].append(final)
            rows.append([variant, seed, final.psnr, final.ssim, final.edge_psnr,
                         final.particle_edge_alignment, final.particle_count])
            print(f"{variant} seed {seed}: psnr {final.psnr:.3f} "
                  f"edge_psnr {final.edge_psnr:.3f} alignment "
                  f"{final.particle_edge_alignment:.4f}")

    with (out_dir / "compare.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "seed", "psnr", "ssim", "edge_psnr",
                         "alignment", "particle_count"])
        for row in rows:
            writer.writerow([row[0], row[1]] + [format(x, ".12g") for x in row[2:6]]
                            + [row[6]])
        for variant in ("baseline", "eggs"):
            rec = finals[variant]
            writer.writerow([variant, "mean",
                             format(float(np.mean([r.psnr for r in rec])), ".12g"),
                             format(float(np.mean([r.ssim for r in rec])), ".12g"),
                             format(float(np.mean([r.edge_psnr for r in rec])), ".12g"),
                             format(float(np.mean([r.particle_edge_alignment
                                                   for r in rec])), ".12g"),
                             format(float(np.mean([r.particle_count for r in rec])), ".12g")])

    curve_paths = [out_dir / f"run_{v}_seed{seeds[0]}" / "metrics.csv"
                   for v in ("baseline", "eggs")]
    plot_psnr_curves(curve_paths, ["baseline", "eggs"], out_dir / "psnr_curves.svg",
                     smoothing_window=5)

    wins_edge = sum(e.edge_psnr > b.edge_psnr
                    for e, b in zip(finals["eggs"], finals["baseline"]))
    wins_align = sum(e.particle_edge_alignment > b.particle_edge_alignment
                     for e, b in zip(finals["eggs"], finals["baseline"]))
    print(_green(f"eggs wins edge_psnr in {wins_edge}/{len(seeds)} seeds, "
                 f"alignment in {wins_align}/{len(seeds)} seeds"))
    return 0


def _cmd_gen_fixture(args) -> int:
    path = generate_scene(args.out_dir, kind=args.kind, n_views=args.views,
                          size=args.size, n_points=args.points, seed=args.seed)
    print(f"wrote {path}")
    return 0


_COMMANDS = {
    "edges": _cmd_edges,
    "fit2d": _cmd_fit2d,
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "compare": _cmd_compare,
    "gen-fixture": _cmd_gen_fixture,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except SystemExit as e:  # --help and friends
        return int(e.code or 0)
    except InternalError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return 2
    except EggsplatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
