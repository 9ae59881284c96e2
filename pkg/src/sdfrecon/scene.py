"""Cameras, lights, the 26-pose rig, and per-pixel ray generation.

World frame conventions (none of these are dictated by the reconstruction
math; they are declared here and exposed through the run config):

* the object bounding box is a unit cube centered at the origin,
* cameras look at the box center from a sphere of radius ``distance``,
* images are square, pixel (0, 0) is top-left, rays pass through pixel
  centers,
* each rendered view uses one directional headlight colocated with its
  camera, so the renderer never has to model self-shadowing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import SdfGrid

__all__ = [
    "Camera",
    "Ray",
    "Light",
    "View",
    "canonical_rig",
    "rig_views",
    "generate_ray",
    "camera_rays",
    "headlight",
    "image_res_for",
]


def _normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-12:
            raise ValueError("ray direction must be unit length")

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass
class Light:
    """Directional light; ``direction`` points toward the surface."""

    direction: np.ndarray
    intensity: float = 1.0
    ambient: float = 0.1
    albedo: float = 1.0

    def __post_init__(self):
        self.direction = _normalize(self.direction)
        for name in ("intensity", "ambient", "albedo"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0.0):
                raise ValueError(f"light {name} must be finite and non-negative")
        if self.albedo > 1.0:
            raise ValueError("albedo must lie in [0, 1]")


@dataclass
class Camera:
    """Pinhole camera defined by pose, vertical field of view and image size."""

    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    vertical_fov: float  # radians
    image_width: int
    image_height: int

    # orthonormal basis, derived once
    forward: np.ndarray = field(init=False, repr=False)
    right: np.ndarray = field(init=False, repr=False)
    true_up: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.look_at = np.asarray(self.look_at, dtype=np.float64).reshape(3)
        self.up = np.asarray(self.up, dtype=np.float64).reshape(3)
        if not 0.0 < self.vertical_fov < math.pi:
            raise ValueError(f"vertical fov must lie in (0, pi), got {self.vertical_fov}")
        if self.image_width < 1 or self.image_height < 1:
            raise ValueError("image dimensions must be positive")
        gaze = self.look_at - self.position
        if np.linalg.norm(gaze) == 0.0:
            raise ValueError("camera position and look_at coincide")
        self.forward = _normalize(gaze)
        right = np.cross(self.forward, self.up)
        if np.linalg.norm(right) < 1e-12:
            raise ValueError("up vector is parallel to the view direction")
        self.right = _normalize(right)
        self.true_up = np.cross(self.right, self.forward)

    @property
    def aspect(self) -> float:
        return self.image_width / self.image_height


def headlight(camera: Camera, intensity=1.0, ambient=0.1, albedo=1.0) -> Light:
    """Directional light shining along the camera's view direction."""
    return Light(camera.forward.copy(), intensity, ambient, albedo)


@dataclass
class View:
    """A camera paired with the light it renders under."""

    camera: Camera
    light: Light


def rig_views(
    bbox_center,
    bbox_half_extent,
    distance,
    fov,
    image_res,
    intensity=1.0,
    ambient=0.1,
    albedo=1.0,
):
    """The canonical 26-camera rig with one headlight per camera."""
    rig = canonical_rig(bbox_center, bbox_half_extent, distance, fov, image_res)
    return [View(c, headlight(c, intensity, ambient, albedo)) for c in rig]


def canonical_rig(bbox_center, bbox_half_extent, distance, fov, image_res):
    """The 26 canonical viewpoints of a cube: its 6 face centers, 12 edge
    centers and 8 vertices, each pushed out to ``distance`` from the center
    along its (normalized) offset direction and aimed back at the center.

    Cameras whose view direction is parallel to the global +z up vector use
    +y instead.  Order is lexicographic over the offset signs in
    ``(-1, 0, 1)**3``, skipping the zero offset.
    """
    center = np.asarray(bbox_center, dtype=np.float64).reshape(3)
    if not distance > bbox_half_extent * math.sqrt(3.0):
        raise ValueError(
            f"camera distance {distance} must exceed the bounding sphere radius "
            f"{bbox_half_extent * math.sqrt(3.0):.6g}"
        )
    cameras = []
    for sx in (-1, 0, 1):
        for sy in (-1, 0, 1):
            for sz in (-1, 0, 1):
                if sx == sy == sz == 0:
                    continue
                u = _normalize(np.array([sx, sy, sz], dtype=np.float64))
                up = (0.0, 1.0, 0.0) if sx == 0 and sy == 0 else (0.0, 0.0, 1.0)
                cameras.append(
                    Camera(
                        position=center + distance * u,
                        look_at=center,
                        up=np.array(up),
                        vertical_fov=fov,
                        image_width=image_res,
                        image_height=image_res,
                    )
                )
    assert len(cameras) == 26
    return cameras


def generate_ray(camera: Camera, px: int, py: int) -> Ray:
    """Ray from the camera origin through the center of pixel (px, py)."""
    if not (0 <= px < camera.image_width and 0 <= py < camera.image_height):
        raise ValueError(
            f"pixel ({px}, {py}) outside image "
            f"{camera.image_width}x{camera.image_height}"
        )
    half_h = math.tan(camera.vertical_fov / 2.0)
    half_w = half_h * camera.aspect
    sx = ((px + 0.5) / camera.image_width * 2.0 - 1.0) * half_w
    sy = (1.0 - (py + 0.5) / camera.image_height * 2.0) * half_h
    d = camera.forward + sx * camera.right + sy * camera.true_up
    return Ray(camera.position.copy(), _normalize(d))


def camera_rays(camera: Camera):
    """All pixel-center ray directions at once.

    Returns ``(origin, directions)`` with ``directions`` of shape
    ``(height, width, 3)``, unit length, row 0 = top image row.
    """
    w, h = camera.image_width, camera.image_height
    half_h = math.tan(camera.vertical_fov / 2.0)
    half_w = half_h * camera.aspect
    sx = ((np.arange(w) + 0.5) / w * 2.0 - 1.0) * half_w
    sy = (1.0 - (np.arange(h) + 0.5) / h * 2.0) * half_h
    d = (
        camera.forward
        + sx[None, :, None] * camera.right
        + sy[:, None, None] * camera.true_up
    )
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return camera.position.copy(), d


def image_res_for(
    grid: SdfGrid,
    camera_distance: float,
    fov: float,
    min_res: int = 16,
    max_res: int = 256,
) -> int:
    """Image resolution matched to the grid resolution.

    Picks the largest resolution R at which a sphere of radius ``spacing``,
    placed at the bounding-box corner farthest from the camera, still projects
    to a diameter of at most 2 pixels, then clamps to ``[min_res, max_res]``.
    The far-corner depth is taken as ``camera_distance`` plus the half
    diagonal of the box (its upper bound over all rig cameras).  With focal
    scale ``(R / 2) / tan(fov / 2)`` pixels, the projected diameter is
    ``R * spacing / (z * tan(fov / 2))``, so R = floor(2 z tan(fov/2) / h).
    """
    if camera_distance <= 0.0 or not 0.0 < fov < math.pi:
        raise ValueError("camera distance and fov must be positive (fov < pi)")
    z = camera_distance + grid.edge_length * math.sqrt(3.0) / 2.0
    r = math.floor(2.0 * z * math.tan(fov / 2.0) / grid.spacing)
    return int(min(max(r, min_res), max_res))
