"""Domain types shared by all modules, parameter activations, validity checks.

Training-time arithmetic is float64 throughout.  All types are plain values:
once constructed they are never mutated, so they are safe to copy and share.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidParticleError

# Bandwidth floor for 2D particles (pixels).  Prevents collapse to delta
# spikes that alias the raster grid.
H_MIN = 0.3

# Tolerance for "is this rotation orthonormal" checks.
ROTATION_TOL = 1e-9


def _as_f64(x, shape, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {a.shape}")
    return a


@dataclass(frozen=True)
class Particle3D:
    """One anisotropic Gaussian primitive in world space.

    ``log_scale`` holds the log of the per-axis standard deviation,
    ``rotation`` a (w, x, y, z) quaternion, ``opacity_logit`` the
    unconstrained opacity parameter.  Activations live in
    :func:`activate_particle`.
    """

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", _as_f64(self.position, (3,), "position"))
        object.__setattr__(self, "log_scale", _as_f64(self.log_scale, (3,), "log_scale"))
        object.__setattr__(self, "rotation", _as_f64(self.rotation, (4,), "rotation"))
        object.__setattr__(self, "opacity_logit", float(self.opacity_logit))
        object.__setattr__(self, "color", _as_f64(self.color, (3,), "color"))


@dataclass(frozen=True)
class Particle2D:
    """Isotropic 2D particle: per-channel amplitude, pixel-space center,
    scalar bandwidth (pixels, must stay above ``H_MIN``)."""

    amplitude: np.ndarray
    center: np.ndarray
    bandwidth: float

    def __post_init__(self):
        object.__setattr__(self, "amplitude", _as_f64(self.amplitude, (3,), "amplitude"))
        object.__setattr__(self, "center", _as_f64(self.center, (2,), "center"))
        object.__setattr__(self, "bandwidth", float(self.bandwidth))


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics plus world-to-camera rigid transform.

    ``rotation`` (3x3) and ``translation`` (3,) map world points x to
    camera space via t = rotation @ x + translation.  Pixel centers sit
    at integer (u, v) coordinates; u is the column index.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "fx", float(self.fx))
        object.__setattr__(self, "fy", float(self.fy))
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "rotation", _as_f64(self.rotation, (3, 3), "rotation"))
        object.__setattr__(self, "translation", _as_f64(self.translation, (3,), "translation"))

    def violations(self, prefix: str = "camera") -> list[str]:
        """Return human-readable invariant violations (empty = valid)."""
        out: list[str] = []
        vals = [self.fx, self.fy, self.cx, self.cy]
        if not np.all(np.isfinite(vals)) or not np.all(np.isfinite(self.rotation)) \
                or not np.all(np.isfinite(self.translation)):
            out.append(f"{prefix}: non-finite parameter")
            return out
        if self.fx <= 0 or self.fy <= 0:
            out.append(f"{prefix}: focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            out.append(f"{prefix}: principal point outside image")
        if self.width < 1 or self.height < 1:
            out.append(f"{prefix}: non-positive image dimensions")
        err = np.max(np.abs(self.rotation.T @ self.rotation - np.eye(3)))
        if err > ROTATION_TOL:
            out.append(f"{prefix}: rotation not orthonormal (|R^T R - I| = {err:.3g})")
        elif np.linalg.det(self.rotation) < 0:
            out.append(f"{prefix}: improper rotation (determinant -1)")
        return out


@dataclass(frozen=True)
class ImageF:
    """Row-major float raster, (H, W, C) float64 with C in {1, 3}.

    Samples must be finite.  Loaded images are clamped to [0, 1]; computed
    rasters (reconstructions, renders) may exceed that range.
    """

    data: np.ndarray

    def __post_init__(self):
        a = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3 or a.shape[2] not in (1, 3):
            raise ValueError(f"image must be (H, W, 1|3), got {a.shape}")
        if a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError("image dimensions must be positive")
        if not np.all(np.isfinite(a)):
            raise ValueError("image contains non-finite samples")
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


# The 2D reconstruction field shares ImageF's layout; values are
# unbounded sums of particle kernels.
Field2D = ImageF


@dataclass(frozen=True)
class Sym2:
    """Symmetric 2x2 matrix stored as upper-triangle (xx, xy, yy)."""

    xx: float
    xy: float
    yy: float

    @classmethod
    def from_matrix(cls, m) -> "Sym2":
        m = np.asarray(m, dtype=np.float64)
        return cls(float(m[0, 0]), float(0.5 * (m[0, 1] + m[1, 0])), float(m[1, 1]))

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.xx, self.xy], [self.xy, self.yy]], dtype=np.float64)

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.as_matrix())


@dataclass(frozen=True)
class Sym3:
    """Symmetric 3x3 matrix stored as upper-triangle coefficients."""

    xx: float
    xy: float
    xz: float
    yy: float
    yz: float
    zz: float

    @classmethod
    def from_matrix(cls, m) -> "Sym3":
        m = np.asarray(m, dtype=np.float64)
        return cls(
            float(m[0, 0]),
            float(0.5 * (m[0, 1] + m[1, 0])),
            float(0.5 * (m[0, 2] + m[2, 0])),
            float(m[1, 1]),
            float(0.5 * (m[1, 2] + m[2, 1])),
            float(m[2, 2]),
        )

    def as_matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.xx, self.xy, self.xz],
                [self.xy, self.yy, self.yz],
                [self.xz, self.yz, self.zz],
            ],
            dtype=np.float64,
        )

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.as_matrix())


@dataclass
class GaussianScene:
    """Struct-of-arrays storage for K anisotropic Gaussian particles.

    The per-particle view is :class:`Particle3D`; all numerical code works
    on these arrays directly.
    """

    positions: np.ndarray      # (K, 3)
    log_scales: np.ndarray     # (K, 3)
    rotations: np.ndarray      # (K, 4) quaternions (w, x, y, z)
    opacity_logits: np.ndarray  # (K,)
    colors: np.ndarray         # (K, 3)

    def __post_init__(self):
        k = len(self.positions)
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(k, 3)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64).reshape(k, 3)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64).reshape(k, 4)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64).reshape(k)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(k, 3)

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls) -> "GaussianScene":
        z = np.zeros((0, 3))
        return cls(z, z.copy(), np.zeros((0, 4)), np.zeros(0), z.copy())

    @classmethod
    def from_particles(cls, particles: Sequence[Particle3D]) -> "GaussianScene":
        if len(particles) == 0:
            return cls.empty()
        return cls(
            np.stack([p.position for p in particles]),
            np.stack([p.log_scale for p in particles]),
            np.stack([p.rotation for p in particles]),
            np.array([p.opacity_logit for p in particles]),
            np.stack([p.color for p in particles]),
        )

    def particle(self, i: int) -> Particle3D:
        return Particle3D(
            self.positions[i],
            self.log_scales[i],
            self.rotations[i],
            float(self.opacity_logits[i]),
            self.colors[i],
        )

    def particles(self) -> list[Particle3D]:
        return [self.particle(i) for i in range(len(self))]

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            self.positions.copy(),
            self.log_scales.copy(),
            self.rotations.copy(),
            self.opacity_logits.copy(),
            self.colors.copy(),
        )


def logistic(x):
    """Numerically stable 1 / (1 + exp(-x)), elementwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p: float) -> float:
    """Inverse of :func:`logistic` for p in (0, 1)."""
    return float(np.log(p) - np.log1p(-p))


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of quaternion(s) (w, x, y, z); normalizes first.

    Accepts (4,) or (K, 4); returns (3, 3) or (K, 3, 3).
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    n = np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = (q / n).T
    r = np.empty((len(q), 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r[0] if single else r


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    """Quaternion (w, x, y, z), w >= 0, of an orthonormal matrix."""
    r = np.asarray(r, dtype=np.float64)
    t = np.trace(r)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b of (w, x, y, z) quaternions."""
    aw, ax, ay, az = np.asarray(a, dtype=np.float64)
    bw, bx, by, bz = np.asarray(b, dtype=np.float64)
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def activate_particle(p: Particle3D) -> tuple[np.ndarray, float, np.ndarray]:
    """Map raw parameters to (scale, opacity, rotation matrix).

    scale = exp(log_scale), opacity = logistic(opacity_logit), rotation
    matrix from the normalized quaternion.
    """
    fields = np.concatenate([p.position, p.log_scale, p.rotation,
                             [p.opacity_logit], p.color])
    if not np.all(np.isfinite(fields)):
        raise InvalidParticleError("particle has non-finite parameters")
    if np.linalg.norm(p.rotation) == 0.0:
        raise InvalidParticleError("zero quaternion cannot be normalized")
    scale = np.exp(p.log_scale)
    opacity = float(logistic(p.opacity_logit))
    return scale, opacity, quat_to_matrix(p.rotation)


def deactivate_particle(scale: np.ndarray, opacity: float,
                        rotation_matrix: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
    """Inverse of :func:`activate_particle` on its open domain.

    Returns (log_scale, opacity_logit, quaternion with w >= 0).  Away from
    logistic saturation the round trip is exact to f64 resolution.
    """
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0) or not (0.0 < opacity < 1.0):
        raise ValueError("scale must be positive and opacity in (0, 1)")
    return np.log(scale), logit(opacity), matrix_to_quat(rotation_matrix)


def scene_activations(scene: GaussianScene) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized activations: scales (K,3), opacities (K,), rotations (K,3,3)."""
    scales = np.exp(scene.log_scales)
    opacities = logistic(scene.opacity_logits)
    rotations = quat_to_matrix(scene.rotations) if len(scene) else np.zeros((0, 3, 3))
    return scales, np.atleast_1d(opacities), rotations


@dataclass
class ValidationReport:
    """Outcome of :func:`validate_scene`; empty violations means valid."""

    violations: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_scene(particles: Iterable[Particle3D] | GaussianScene,
                   cameras: Iterable[Camera] = ()) -> ValidationReport:
    """Check particle and camera invariants without mutating anything."""
    if isinstance(particles, GaussianScene):
        particles = particles.particles()
    report = ValidationReport()
    count = 0
    for i, p in enumerate(particles):
        count += 1
        for name, value in (("position", p.position), ("log_scale", p.log_scale),
                            ("rotation", p.rotation), ("opacity_logit", p.opacity_logit),
                            ("color", p.color)):
            if not np.all(np.isfinite(value)):
                report.violations.append(f"particle {i}: non-finite {name}")
        if np.all(np.isfinite(p.rotation)) and np.linalg.norm(p.rotation) < 1e-12:
            report.violations.append(f"particle {i}: degenerate quaternion")
        if np.all(np.isfinite(p.log_scale)) and np.any(p.log_scale > 700.0):
            report.violations.append(f"particle {i}: log_scale overflows exp")
    if count == 0:
        report.warnings.append("empty scene")
    for j, cam in enumerate(cameras):
        report.violations.extend(cam.violations(prefix=f"camera {j}"))
    return report
