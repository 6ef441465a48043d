"""Equirectangular panorama synthesis from a rotation-only pinhole rig.

Conventions
-----------
Ego frame: x forward, y left, z up.  Panorama column ``k`` has longitude
``theta = (k + 0.5) / width * 2 pi - pi`` (positive to the left) and row ``j``
has latitude ``phi = lat_max - (j + 0.5) / height * (lat_max - lat_min)``.

Camera frame: x right, y down, z along the optical axis.  A camera's
``rotation`` maps ego directions to camera directions.  Intersecting a ray
with the image plane ``z = f`` and reading off pixel coordinates is the same
as the pinhole projection ``u = fx x / z + cx``, ``v = fy y / z + cy``, which
is what ``project_to_camera`` evaluates.

Overlaps are resolved by priority: the valid camera with the lowest priority
index supplies the pixel, sampled nearest-neighbour, and nothing is blended.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FRONT_EPS = 1e-6
UNCOVERED = 255


class RigError(ValueError):
    """Invalid rig description or rig/image mismatch."""


@dataclass
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    width: int
    height: int
    priority: int = 0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not (self.fx > 0 and self.fy > 0):
            raise RigError(f"camera {self.priority}: focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise RigError(f"camera {self.priority}: image size must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise RigError(f"camera {self.priority}: principal point outside the image")
        err = np.max(np.abs(self.rotation.T @ self.rotation - np.eye(3)))
        if err > 1e-9:
            raise RigError(f"camera {self.priority}: rotation is not orthonormal (error {err:.3g})")

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def looking_at(cls, yaw: float, hfov: float, width: int, height: int, priority: int = 0,
                   pitch: float = 0.0) -> "PinholeCamera":
        """Square-pixel camera centred on the image with horizontal field of view ``hfov`` (radians)."""
        f = width / 2 / math.tan(hfov / 2)
        return cls(f, f, width / 2, height / 2, yaw_pitch_rotation(yaw, pitch), width, height, priority)


def yaw_pitch_rotation(yaw: float, pitch: float = 0.0) -> np.ndarray:
    """Ego-to-camera rotation for an optical axis at (yaw, pitch); yaw positive to the left."""
    cy, sy, cp, sp = math.cos(yaw), math.sin(yaw), math.cos(pitch), math.sin(pitch)
    forward = np.array([cp * cy, cp * sy, sp])
    right = np.array([sy, -cy, 0.0])
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


@dataclass
class CameraRig:
    cameras: list[PinholeCamera] = field(default_factory=list)

    def __post_init__(self):
        if not self.cameras:
            raise RigError("rig has no cameras")
        prios = sorted(c.priority for c in self.cameras)
        if prios != list(range(len(self.cameras))):
            raise RigError(f"priorities must be unique and contiguous from 0, got {prios}")
        self.cameras = sorted(self.cameras, key=lambda c: c.priority)

    def to_json(self) -> dict:
        return {
            "cameras": [
                {
                    "priority": c.priority, "width": c.width, "height": c.height,
                    "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
                    "rotation": [float(v) for v in c.rotation.reshape(-1)],
                }
                for c in self.cameras
            ]
        }

    @classmethod
    def from_json(cls, data: dict) -> "CameraRig":
        if not isinstance(data, dict) or not isinstance(data.get("cameras"), list):
            raise RigError("rig: expected an object with a 'cameras' list")
        cams = []
        for i, c in enumerate(data["cameras"]):
            where = f"cameras[{i}]"
            if not isinstance(c, dict):
                raise RigError(f"{where}: expected an object")
            for key in ("priority", "width", "height", "fx", "fy", "cx", "cy", "rotation"):
                if key not in c:
                    raise RigError(f"{where}.{key}: missing")
            rot = c["rotation"]
            if not (isinstance(rot, list) and len(rot) == 9 and all(isinstance(v, (int, float)) for v in rot)):
                raise RigError(f"{where}.rotation: expected 9 numbers")
            for key in ("priority", "width", "height"):
                if not isinstance(c[key], int) or isinstance(c[key], bool):
                    raise RigError(f"{where}.{key}: expected an integer")
            try:
                cams.append(PinholeCamera(float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]),
                                          np.array(rot, dtype=np.float64), c["width"], c["height"], c["priority"]))
            except RigError as exc:
                raise RigError(f"{where}: {exc}") from None
            except (TypeError, ValueError) as exc:
                raise RigError(f"{where}: {exc}") from None
        return cls(cams)

    @classmethod
    def load(cls, path) -> "CameraRig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise RigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_json(data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


def ring_rig(yaws_deg, hfov_deg: float = 90.0, width: int = 64, height: int = 96) -> CameraRig:
    """Cameras on the horizon at the given yaws, priority in list order."""
    return CameraRig([
        PinholeCamera.looking_at(math.radians(y), math.radians(hfov_deg), width, height, i)
        for i, y in enumerate(yaws_deg)
    ])


DEMO_YAWS = (0.0, 60.0, -60.0, 120.0, -120.0, 180.0)


@dataclass
class PanoramaSpec:
    width: int
    height: int
    lat_min: float = -math.pi / 4
    lat_max: float = math.pi / 4

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("panorama size must be positive")
        if not (-math.pi / 2 <= self.lat_min < self.lat_max <= math.pi / 2):
            raise ValueError("need -pi/2 <= lat_min < lat_max <= pi/2")

    def longitudes(self) -> np.ndarray:
        return (np.arange(self.width) + 0.5) / self.width * 2 * math.pi - math.pi

    def latitudes(self) -> np.ndarray:
        return self.lat_max - (np.arange(self.height) + 0.5) / self.height * (self.lat_max - self.lat_min)


@dataclass
class RgbImage:
    pixels: np.ndarray
    coverage: np.ndarray | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"pixels must be (height, width, 3), got {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def pixel_to_ray(spec: PanoramaSpec, j: int, k: int) -> np.ndarray:
    if not (0 <= j < spec.height and 0 <= k < spec.width):
        raise IndexError(f"pixel ({j}, {k}) outside {spec.height}x{spec.width} panorama")
    theta = (k + 0.5) / spec.width * 2 * math.pi - math.pi
    phi = spec.lat_max - (j + 0.5) / spec.height * (spec.lat_max - spec.lat_min)
    return np.array([math.cos(phi) * math.cos(theta), math.cos(phi) * math.sin(theta), math.sin(phi)])


def panorama_rays(spec: PanoramaSpec) -> np.ndarray:
    """All ray directions as a ``(height, width, 3)`` array."""
    theta = spec.longitudes()[None, :]
    phi = spec.latitudes()[:, None]
    return np.stack(np.broadcast_arrays(np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), np.sin(phi)), axis=-1)


def project_rays(cam: PinholeCamera, rays: np.ndarray):
    """Vectorised projection; returns ``(u, v, valid)`` over the leading shape of ``rays``."""
    x, y, z = rays[..., 0], rays[..., 1], rays[..., 2]
    r = cam.rotation
    # explicit sums (no BLAS) keep each element's arithmetic independent of array shape
    px = r[0, 0] * x + r[0, 1] * y + r[0, 2] * z
    py = r[1, 0] * x + r[1, 1] * y + r[1, 2] * z
    pz = r[2, 0] * x + r[2, 1] * y + r[2, 2] * z
    front = pz > FRONT_EPS
    safe = np.where(front, pz, 1.0)
    u = cam.fx * px / safe + cam.cx
    v = cam.fy * py / safe + cam.cy
    valid = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return u, v, valid


def project_to_camera(cam: PinholeCamera, ray) -> tuple[float, float] | None:
    u, v, valid = project_rays(cam, np.asarray(ray, dtype=np.float64).reshape(1, 3))
    return (float(u[0]), float(v[0])) if valid[0] else None


def _stitch_rows(rig, images, rays, out, cov, rows):
    r = rays[rows]
    unresolved = np.ones(r.shape[:2], dtype=bool)
    block = out[rows]
    cblock = cov[rows]
    for cam, img in zip(rig.cameras, images):
        u, v, valid = project_rays(cam, r)
        take = valid & unresolved
        if not take.any():
            continue
        ui = np.floor(u[take]).astype(np.intp)
        vi = np.floor(v[take]).astype(np.intp)
        block[take] = img.pixels[vi, ui]
        cblock[take] = cam.priority
        unresolved &= ~take
    out[rows] = block
    cov[rows] = cblock


def stitch(rig: CameraRig, images: list[RgbImage], spec: PanoramaSpec, workers: int = 1) -> RgbImage:
    """First-hit-wins stitching; the result carries a coverage map (camera index or 255)."""
    if len(images) != len(rig.cameras):
        raise RigError(f"rig has {len(rig.cameras)} cameras but {len(images)} images were given")
    for cam, img in zip(rig.cameras, images):
        if (img.width, img.height) != (cam.width, cam.height):
            raise RigError(
                f"camera {cam.priority} expects {cam.width}x{cam.height}, image is {img.width}x{img.height}"
            )
    if len(rig.cameras) >= UNCOVERED:
        raise RigError(f"at most {UNCOVERED} cameras fit in the coverage map")
    rays = panorama_rays(spec)
    out = np.zeros((spec.height, spec.width, 3), dtype=np.uint8)
    cov = np.full((spec.height, spec.width), UNCOVERED, dtype=np.uint8)
    n_chunks = max(1, min(workers, spec.height))
    bounds = np.linspace(0, spec.height, n_chunks + 1).astype(int)
    chunks = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    if n_chunks == 1:
        _stitch_rows(rig, images, rays, out, cov, chunks[0])
    else:
        with ThreadPoolExecutor(max_workers=n_chunks) as pool:
            list(pool.map(lambda rows: _stitch_rows(rig, images, rays, out, cov, rows), chunks))
    return RgbImage(out, cov)


def solid_images(rig: CameraRig, colors) -> list[RgbImage]:
    return [
        RgbImage(np.broadcast_to(np.asarray(c, dtype=np.uint8), (cam.height, cam.width, 3)).copy())
        for cam, c in zip(rig.cameras, colors)
    ]
