"""Synthetic multi-view scenes with exact cameras and ground truth.

Two fixtures: a textured cube seen from a camera ring, and the inside of a
checkerboard-papered room.  Both are ray-cast against analytic geometry,
so every view is pixel-accurate and the scene needs no reconstruction
preprocessing.  The generator also writes a surface point cloud (for
initialization), scene bounds, and a reprojection sidecar used to verify
camera round trips.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import Camera, ImageF
from .io import save_image, save_ply_points

# Per-face two-color checker palettes (bright/dark), one per cube face
# (+x, -x, +y, -y, +z, -z).
_FACE_PALETTES = np.array([
    [[0.95, 0.25, 0.20], [0.15, 0.05, 0.05]],
    [[0.20, 0.85, 0.30], [0.04, 0.15, 0.06]],
    [[0.25, 0.45, 0.95], [0.05, 0.08, 0.18]],
    [[0.95, 0.85, 0.20], [0.18, 0.15, 0.04]],
    [[0.90, 0.35, 0.90], [0.16, 0.06, 0.16]],
    [[0.25, 0.90, 0.90], [0.05, 0.16, 0.16]],
])


def look_at_camera(eye, target, fx: float, fy: float, width: int, height: int) -> Camera:
    """Camera at ``eye`` looking toward ``target``; +z forward, +y image-down."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up_world = np.array([0.0, 0.0, 1.0])
    y_axis = -up_world + np.dot(up_world, fwd) * fwd
    ny = np.linalg.norm(y_axis)
    if ny < 1e-9:
        raise ValueError("camera forward parallel to world up")
    y_axis /= ny
    x_axis = np.cross(y_axis, fwd)
    rot = np.stack([x_axis, y_axis, fwd])
    return Camera(fx, fy, (width - 1) / 2.0, (height - 1) / 2.0,
                  width, height, rot, -rot @ eye)


def _checker_color(face: np.ndarray, a: np.ndarray, b: np.ndarray,
                   cells: int) -> np.ndarray:
    """Texture lookup on face-local coordinates a, b in [-1, 1]."""
    ia = np.clip(np.floor((a + 1.0) * 0.5 * cells), 0, cells - 1).astype(np.int64)
    ib = np.clip(np.floor((b + 1.0) * 0.5 * cells), 0, cells - 1).astype(np.int64)
    parity = (ia + ib) % 2
    return _FACE_PALETTES[face, parity]


_FACE_UV_AXES = {0: (1, 2), 1: (1, 2), 2: (0, 2), 3: (0, 2), 4: (0, 1), 5: (0, 1)}


def _face_of_point(p: np.ndarray, half: float) -> np.ndarray:
    """Face index (axis*2 + (sign<0)) of points on a box surface."""
    ax = np.argmax(np.abs(p) / half, axis=1)
    sign = np.take_along_axis(p, ax[:, None], axis=1)[:, 0] < 0
    return ax * 2 + sign.astype(np.int64)


def _surface_colors(points: np.ndarray, half: float, cells: int) -> np.ndarray:
    faces = _face_of_point(points, half)
    colors = np.empty((len(points), 3))
    for f in range(6):
        m = faces == f
        if not np.any(m):
            continue
        ua, ub = _FACE_UV_AXES[f]
        colors[m] = _checker_color(np.full(int(np.sum(m)), f),
                                   points[m, ua] / half, points[m, ub] / half, cells)
    return colors


def _ray_box(origins: np.ndarray, dirs: np.ndarray, half: float,
             inside: bool) -> tuple[np.ndarray, np.ndarray]:
    """Slab intersection with the box [-half, half]^3.

    Returns (hit mask, hit points); entry points from outside, exit points
    from inside.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t1 = (-half - origins) * inv
    t2 = (half - origins) * inv
    t_near = np.max(np.minimum(t1, t2), axis=1)
    t_far = np.min(np.maximum(t1, t2), axis=1)
    if inside:
        hit = t_far > 0
        t = t_far
    else:
        hit = (t_near <= t_far) & (t_near > 0)
        t = t_near
    return hit, origins + t[:, None] * dirs


def render_view(cam: Camera, half: float, cells: int, inside: bool,
                background=(0.0, 0.0, 0.0), supersample: int = 2) -> ImageF:
    """Ray-cast one view of the textured box at ``supersample``^2 rays/px."""
    h, w, s = cam.height, cam.width, supersample
    sub = (np.arange(s) + 0.5) / s - 0.5
    vv, uu, sv, su = np.meshgrid(np.arange(h, dtype=np.float64),
                                 np.arange(w, dtype=np.float64),
                                 sub, sub, indexing="ij")
    u = (uu + su).ravel()
    v = (vv + sv).ravel()
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy,
                      np.ones_like(u)], axis=1)
    dirs = d_cam @ cam.rotation  # R^T rows applied to each dir
    eye = -cam.rotation.T @ cam.translation
    origins = np.broadcast_to(eye, dirs.shape)

    colors = np.tile(np.asarray(background, dtype=np.float64), (len(dirs), 1))
    hit, points = _ray_box(origins, dirs, half, inside)
    if np.any(hit):
        colors[hit] = _surface_colors(points[hit], half, cells)
    img = colors.reshape(h, w, s * s, 3).mean(axis=2)
    return ImageF(np.clip(img, 0.0, 1.0))


def _sample_surface(n: int, half: float, rng: np.random.Generator) -> np.ndarray:
    faces = rng.integers(0, 6, size=n)
    ab = rng.uniform(-1.0, 1.0, size=(n, 2)) * half
    points = np.empty((n, 3))
    for i in range(n):
        f = faces[i]
        ax = f // 2
        sign = -1.0 if f % 2 else 1.0
        ua, ub = _FACE_UV_AXES[f]
        p = np.empty(3)
        p[ax] = sign * half
        p[ua] = ab[i, 0]
        p[ub] = ab[i, 1]
        points[i] = p
    return points


def _camera_dict(cam: Camera) -> dict:
    rt = np.concatenate([cam.rotation, cam.translation[:, None]], axis=1)
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "world_to_camera": rt.reshape(12).tolist()}


def _project(cam: Camera, points: np.ndarray) -> np.ndarray:
    t = points @ cam.rotation.T + cam.translation
    return np.stack([cam.fx * t[:, 0] / t[:, 2] + cam.cx,
                     cam.fy * t[:, 1] / t[:, 2] + cam.cy], axis=1)


def generate_scene(out_dir, kind: str = "cube", n_views: int = 8,
                   size: int = 128, n_points: int = 400, seed: int = 0) -> Path:
    """Write images, manifest, point cloud, and reprojection sidecar.

    Returns the manifest path.  ``kind`` is "cube" (object on black
    background, ring of outside-in cameras) or "checkerboard" (room
    interior, ring of inside-out cameras).
    """
    if kind not in ("cube", "checkerboard"):
        raise ValueError("kind must be 'cube' or 'checkerboard'")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    if kind == "cube":
        half, cells, inside = 1.0, 4, False
        fx = 0.5 * size / np.tan(np.deg2rad(25.0))
        ring_r, ring_z = 4.0, 2.0
        eyes = [np.array([ring_r * np.cos(a), ring_r * np.sin(a), ring_z])
                for a in 2 * np.pi * np.arange(n_views) / n_views]
        targets = [np.zeros(3)] * n_views
        bounds = (-1.4, 1.4)
    else:
        half, cells, inside = 2.0, 6, True
        fx = 0.5 * size / np.tan(np.deg2rad(35.0))
        ring_r = 0.5
        eyes, targets = [], []
        for a in 2 * np.pi * np.arange(n_views) / n_views:
            d = np.array([np.cos(a), np.sin(a), 0.0])
            eyes.append(ring_r * d + np.array([0.0, 0.0, 0.12 * np.sin(3 * a)]))
            targets.append(eyes[-1] + d + np.array([0.0, 0.0, 0.1 * np.cos(2 * a)]))
        bounds = (-1.95, 1.95)

    views = []
    cams = []
    for i, (eye, target) in enumerate(zip(eyes, targets)):
        cam = look_at_camera(eye, target, fx, fx, size, size)
        cams.append(cam)
        img = render_view(cam, half, cells, inside)
        name = f"view_{i:03d}.ppm"
        save_image(img, out / name)
        views.append({"image": name, "camera": _camera_dict(cam)})

    points = _sample_surface(n_points, half, rng)
    if inside:
        # Keep init points off the walls so particles start inside the room.
        points *= 0.92
        colors = _surface_colors(points / 0.92, half, cells)
    else:
        colors = _surface_colors(points, half, cells)
    save_ply_points(points, colors, out / "points.ply")

    manifest = {
        "views": views,
        "points": "points.ply",
        "bounds": {"min": [bounds[0]] * 3, "max": [bounds[1]] * 3},
    }
    manifest_path = out / "scene.json"
    manifest_path.write_text(json.dumps(manifest, indent=1))

    probe = _sample_surface(8, half * (0.9 if inside else 1.0), rng)
    checks = []
    for i, cam in enumerate(cams):
        t = probe @ cam.rotation.T + cam.translation
        ok = t[:, 2] > 0.01
        uv = _project(cam, probe[ok])
        checks.append({"view": i, "points": probe[ok].tolist(), "uv": uv.tolist()})
    (out / "reprojection.json").write_text(json.dumps(checks, indent=1))
    return manifest_path
