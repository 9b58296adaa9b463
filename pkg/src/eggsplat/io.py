"""Persistence: images, scene manifests, checkpoints, point clouds.

Scene manifests are JSON (grammar in the README); images are binary PPM/PGM
with 8-bit samples, plus optional PNG via Pillow.  Checkpoints are a text
header followed by a checksummed little-endian float64 payload.  Every
writer is deterministic: identical inputs produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Camera, GaussianScene, ImageF
from .edge import EdgeConfig, WeightMap, edge_weight_map
from .errors import (BadMatrixShapeError, ChecksumError, MalformedHeaderError,
                     MalformedPlyHeaderError, MissingFileError,
                     MissingPropertyError, NonRigidRotationError,
                     TruncatedPayloadError, UnsupportedBitDepthError,
                     VersionMismatchError)

CHECKPOINT_MAGIC = "EGGSPLAT-CHECKPOINT"
CHECKPOINT_VERSION = 1

# Manifests reject rotations further than this from orthonormal.
MANIFEST_ROTATION_TOL = 1e-6


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def _pnm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """First ``count`` integer tokens after the magic, honoring # comments.

    Returns the tokens and the offset one whitespace byte past the last.
    """
    tokens: list[int] = []
    i = 2  # past the 2-byte magic
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i] == ord("#"):
            while i < n and data[i] != ord("\n"):
                i += 1
            continue
        start = i
        while i < n and not data[i:i + 1].isspace():
            i += 1
        if start == i:
            raise MalformedHeaderError("truncated PNM header")
        try:
            tokens.append(int(data[start:i]))
        except ValueError as e:
            raise MalformedHeaderError(f"bad PNM header token {data[start:i]!r}") from e
    if i >= n:
        raise MalformedHeaderError("PNM header not followed by payload")
    return tokens, i + 1  # single whitespace separates header from payload


def _load_pnm(data: bytes, path: str) -> ImageF:
    magic = data[:2]
    if magic not in (b"P6", b"P5"):
        raise MalformedHeaderError(f"{path}: not a binary PPM/PGM (magic {magic!r})")
    channels = 3 if magic == b"P6" else 1
    (width, height, maxval), offset = _pnm_tokens(data, 3)
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"{path}: non-positive dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedBitDepthError(f"{path}: only 8-bit samples supported, maxval={maxval}")
    need = width * height * channels
    payload = data[offset:offset + need]
    if len(payload) < need:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(payload)} bytes, expected {need}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return ImageF(arr.astype(np.float64) / 255.0)


def load_image(path) -> ImageF:
    """Load a PPM/PGM (or PNG) file as float64 in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"image file not found: {path}")
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm", ".pnm"):
        return _load_pnm(path.read_bytes(), str(path))
    if suffix == ".png":
        from PIL import Image
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB")
            arr = np.asarray(img, dtype=np.float64) / 255.0
        return ImageF(arr)
    raise MalformedHeaderError(f"unsupported image extension: {path.suffix}")


def _quantize(img: ImageF) -> np.ndarray:
    return np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)


def save_image(img: ImageF, path) -> None:
    """Write 8-bit PPM (color), PGM (gray), or PNG depending on extension."""
    path = Path(path)
    suffix = path.suffix.lower()
    arr = _quantize(img)
    if suffix == ".png":
        from PIL import Image
        mode = "L" if img.channels == 1 else "RGB"
        data = arr[:, :, 0] if img.channels == 1 else arr
        Image.fromarray(data, mode=mode).save(path)
        return
    if suffix == ".pgm":
        if img.channels == 3:
            arr = _quantize(ImageF(img.data @ np.array([0.299, 0.587, 0.114])))
        header = f"P5\n{img.width} {img.height}\n255\n".encode()
        path.write_bytes(header + arr[:, :, 0].tobytes())
        return
    if img.channels == 1:
        arr = np.repeat(arr, 3, axis=2)
    header = f"P6\n{img.width} {img.height}\n255\n".encode()
    path.write_bytes(header + arr.tobytes())


# ---------------------------------------------------------------------------
# scene manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ViewSpec:
    image_path: Path
    camera: Camera


@dataclass(frozen=True)
class SceneManifest:
    views: tuple[ViewSpec, ...]
    points_path: Path | None
    bounds: tuple[np.ndarray, np.ndarray] | None


@dataclass(frozen=True)
class View:
    """A training view: image, camera, and its precomputed weight map."""

    image: ImageF
    camera: Camera
    phi: WeightMap


def _camera_from_dict(d: dict, where: str) -> Camera:
    try:
        wc = d["world_to_camera"]
        fx, fy, cx, cy = d["fx"], d["fy"], d["cx"], d["cy"]
        width, height = d["width"], d["height"]
    except KeyError as e:
        raise BadMatrixShapeError(f"{where}: missing camera key {e}") from e
    wc = np.asarray(wc, dtype=np.float64)
    if wc.shape != (12,):
        raise BadMatrixShapeError(
            f"{where}: world_to_camera must be 12 numbers (row-major R|t), got shape {wc.shape}")
    m = wc.reshape(3, 4)
    rot, trans = m[:, :3], m[:, 3]
    err = float(np.max(np.abs(rot.T @ rot - np.eye(3))))
    if err > MANIFEST_ROTATION_TOL or np.linalg.det(rot) < 0:
        raise NonRigidRotationError(
            f"{where}: rotation block not orthonormal (error {err:.3g}, "
            f"det {np.linalg.det(rot):.3g})")
    return Camera(fx, fy, cx, cy, width, height, rot, trans)


def read_manifest(path) -> SceneManifest:
    """Parse the JSON manifest and validate file references and cameras."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise MalformedHeaderError(f"{path}: invalid JSON ({e})") from e
    base = path.parent
    views = []
    for i, entry in enumerate(doc.get("views", [])):
        img_path = base / entry["image"]
        if not img_path.is_file():
            raise MissingFileError(f"view {i}: image file not found: {img_path}")
        cam = _camera_from_dict(entry["camera"], f"view {i}")
        views.append(ViewSpec(img_path, cam))
    points_path = None
    if doc.get("points"):
        points_path = base / doc["points"]
        if not points_path.is_file():
            raise MissingFileError(f"points file not found: {points_path}")
    bounds = None
    if doc.get("bounds"):
        bounds = (np.asarray(doc["bounds"]["min"], dtype=np.float64),
                  np.asarray(doc["bounds"]["max"], dtype=np.float64))
    return SceneManifest(tuple(views), points_path, bounds)


def load_manifest(path, edge_cfg: EdgeConfig = EdgeConfig()
                  ) -> tuple[SceneManifest, list[View]]:
    """Load every view's image and compute its weight map, once."""
    manifest = read_manifest(path)
    views = []
    for spec in manifest.views:
        img = load_image(spec.image_path)
        if (img.height, img.width) != (spec.camera.height, spec.camera.width):
            raise BadMatrixShapeError(
                f"{spec.image_path}: image is {img.height}x{img.width} but camera "
                f"says {spec.camera.height}x{spec.camera.width}")
        views.append(View(img, spec.camera, edge_weight_map(img, edge_cfg)))
    return manifest, views


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Serialized scene state plus enough context to resume or render."""

    iteration: int
    scene: GaussianScene
    config: dict
    rng_state: dict | None = None
    format_version: int = CHECKPOINT_VERSION

    def payload(self) -> bytes:
        s = self.scene
        parts = [np.ascontiguousarray(a, dtype="<f8").tobytes()
                 for a in (s.positions, s.log_scales, s.rotations,
                           s.opacity_logits, s.colors)]
        return b"".join(parts)

    def state_hash(self) -> str:
        """Hash of the optimization state (arrays, iteration, rng).

        Deliberately excludes the config echo so runs that are numerically
        identical hash identically regardless of how they were requested.
        """
        h = hashlib.sha256()
        h.update(self.payload())
        h.update(str(self.iteration).encode())
        h.update(json.dumps(self.rng_state, sort_keys=True).encode())
        return h.hexdigest()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    payload = ckpt.payload()
    header = "\n".join([
        f"{CHECKPOINT_MAGIC} {ckpt.format_version}",
        f"iteration {ckpt.iteration}",
        f"particles {len(ckpt.scene)}",
        "rng " + json.dumps(ckpt.rng_state, sort_keys=True),
        "config " + json.dumps(ckpt.config, sort_keys=True),
        f"payload_sha256 {hashlib.sha256(payload).hexdigest()}",
        "end_header\n",
    ])
    Path(path).write_bytes(header.encode() + payload)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    marker = b"end_header\n"
    pos = raw.find(marker)
    if pos < 0:
        raise MalformedHeaderError(f"{path}: missing end_header")
    lines = raw[:pos].decode().splitlines()
    fields = {}
    magic_line = lines[0].split()
    if len(magic_line) != 2 or magic_line[0] != CHECKPOINT_MAGIC:
        raise VersionMismatchError(f"{path}: not a checkpoint file")
    if int(magic_line[1]) != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"{path}: unsupported checkpoint version {magic_line[1]}")
    for line in lines[1:]:
        key, _, value = line.partition(" ")
        fields[key] = value
    iteration = int(fields["iteration"])
    k = int(fields["particles"])
    rng_state = json.loads(fields["rng"])
    config = json.loads(fields["config"])
    payload = raw[pos + len(marker):]
    expected = k * (3 + 3 + 4 + 1 + 3) * 8
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(payload)} bytes, expected {expected}")
    if hashlib.sha256(payload).hexdigest() != fields["payload_sha256"]:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    flat = np.frombuffer(payload, dtype="<f8")
    o = 0
    def take(n, shape):
        nonlocal o
        out = flat[o:o + n].reshape(shape).copy()
        o += n
        return out
    scene = GaussianScene(
        take(k * 3, (k, 3)), take(k * 3, (k, 3)), take(k * 4, (k, 4)),
        take(k, (k,)), take(k * 3, (k, 3)))
    return Checkpoint(iteration, scene, config, rng_state)


PARTICLES2D_MAGIC = "EGGSPLAT-PARTICLES2D"


def save_particles2d(particles, path) -> None:
    """Checksummed binary dump of a 2D particle list (amplitude, center,
    bandwidth as little-endian float64)."""
    from .core import Particle2D  # noqa: F401  (documents the element type)
    k = len(particles)
    amps = np.stack([p.amplitude for p in particles]) if k else np.zeros((0, 3))
    centers = np.stack([p.center for p in particles]) if k else np.zeros((0, 2))
    bands = np.array([p.bandwidth for p in particles])
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                       for a in (amps, centers, bands))
    header = "\n".join([
        f"{PARTICLES2D_MAGIC} 1",
        f"particles {k}",
        f"payload_sha256 {hashlib.sha256(payload).hexdigest()}",
        "end_header\n",
    ])
    Path(path).write_bytes(header.encode() + payload)


def load_particles2d(path):
    from .core import Particle2D
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"particle file not found: {path}")
    raw = path.read_bytes()
    marker = b"end_header\n"
    pos = raw.find(marker)
    if pos < 0 or not raw.startswith(PARTICLES2D_MAGIC.encode()):
        raise MalformedHeaderError(f"{path}: not a 2D particle file")
    lines = raw[:pos].decode().splitlines()
    if lines[0] != f"{PARTICLES2D_MAGIC} 1":
        raise VersionMismatchError(f"{path}: unsupported version {lines[0]!r}")
    fields = dict(line.partition(" ")[::2] for line in lines[1:])
    k = int(fields["particles"])
    payload = raw[pos + len(marker):]
    if len(payload) != k * 6 * 8:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes")
    if hashlib.sha256(payload).hexdigest() != fields["payload_sha256"]:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    flat = np.frombuffer(payload, dtype="<f8")
    amps = flat[:k * 3].reshape(k, 3)
    centers = flat[k * 3:k * 5].reshape(k, 2)
    bands = flat[k * 5:]
    return [Particle2D(amps[i].copy(), centers[i].copy(), float(bands[i]))
            for i in range(k)]


# ---------------------------------------------------------------------------
# PLY point clouds
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "uchar": ("u1", 1), "uint8": ("u1", 1),
    "char": ("i1", 1), "int8": ("i1", 1),
    "short": ("<i2", 2), "ushort": ("<u2", 2),
    "int": ("<i4", 4), "int32": ("<i4", 4),
    "uint": ("<u4", 4), "uint32": ("<u4", 4),
}


def load_ply_points(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Positions (N, 3) and optional colors (N, 3) in [0, 1], file order.

    Supports ascii and binary_little_endian PLY whose first element is
    ``vertex`` with x, y, z properties (red, green, blue optional).
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"point file not found: {path}")
    raw = path.read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise MalformedPlyHeaderError(f"{path}: missing ply/end_header")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n"):]

    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    seen_element = False
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            if parts[1] == "vertex":
                if seen_element:
                    raise MalformedPlyHeaderError(
                        f"{path}: vertex element must come first")
                count = int(parts[2])
                in_vertex = True
            else:
                in_vertex = False
            seen_element = True
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise MalformedPlyHeaderError(f"{path}: list property in vertex element")
            props.append((parts[1], parts[2]))
    if fmt not in ("ascii", "binary_little_endian") or count is None:
        raise MalformedPlyHeaderError(f"{path}: unsupported or incomplete header")
    names = [name for _, name in props]
    if not all(axis in names for axis in ("x", "y", "z")):
        raise MissingPropertyError(f"{path}: vertex element lacks x/y/z")
    has_color = all(ch in names for ch in ("red", "green", "blue"))

    if fmt == "ascii":
        rows = body.decode("ascii", errors="replace").split()
        need = count * len(props)
        if len(rows) < need:
            raise TruncatedPayloadError(
                f"{path}: {len(rows)} ascii values, expected {need}")
        table = np.array(rows[:need], dtype=np.float64).reshape(count, len(props))
        cols = {name: table[:, i] for i, (_, name) in enumerate(props)}
    else:
        try:
            dtype = np.dtype([(name, _PLY_TYPES[t][0]) for t, name in props])
        except KeyError as e:
            raise MalformedPlyHeaderError(f"{path}: unsupported property type {e}") from e
        need = count * dtype.itemsize
        if len(body) < need:
            raise TruncatedPayloadError(
                f"{path}: payload has {len(body)} bytes, expected {need}")
        rec = np.frombuffer(body[:need], dtype=dtype)
        cols = {name: rec[name].astype(np.float64) for _, name in props}

    positions = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    colors = None
    if has_color:
        colors = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1) / 255.0
    return positions, colors


def save_ply_points(positions: np.ndarray, colors: np.ndarray | None, path) -> None:
    """Binary little-endian PLY with float positions and uchar colors."""
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    props = ["property double x", "property double y", "property double z"]
    if colors is not None:
        props += ["property uchar red", "property uchar green", "property uchar blue"]
    header = "\n".join(["ply", "format binary_little_endian 1.0",
                        f"element vertex {n}", *props, "end_header\n"]).encode()
    if colors is None:
        body = np.ascontiguousarray(positions, dtype="<f8").tobytes()
    else:
        cu = np.clip(np.rint(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)
        dtype = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                          ("red", "u1"), ("green", "u1"), ("blue", "u1")])
        rec = np.empty(n, dtype=dtype)
        rec["x"], rec["y"], rec["z"] = positions.T
        rec["red"], rec["green"], rec["blue"] = cu.T
        body = rec.tobytes()
    Path(path).write_bytes(header + body)
