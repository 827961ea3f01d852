"""Cameras, ground-plane rigid placements, and oriented-box overlap.

Conventions used throughout the package:

* World frame: +y is up, the ground plane is y = 0.
* Azimuth is a rotation about +y, positive in the right-handed sense
  (+x rotates toward -z).
* Cameras are pinhole cameras with the principal point fixed at the
  image center.  Projection returns continuous coordinates expressed
  in keypoint-map cells (image pixels rescaled by map_size/image_size),
  because every consumer of projections works on the map grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

MIN_PROJECTION_DEPTH = 1e-6
_ORTHONORMAL_TOL = 1e-9


class PointBehindCamera(ValueError):
    """A world point does not lie strictly in front of the camera."""


def wrap_angle(a):
    """Wrap an angle (radians) into [-pi, pi)."""
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def rot_up(azimuth: float) -> np.ndarray:
    """3x3 rotation about +y. Positive azimuth turns +x toward -z."""
    c, s = math.cos(azimuth), math.sin(azimuth)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot2(azimuth: float) -> np.ndarray:
    """Ground-plane (x, z) block of rot_up; maps local offsets to world."""
    c, s = math.cos(azimuth), math.sin(azimuth)
    return np.array([[c, s], [-s, c]])


def _as_readonly(a, shape, dtype=float):
    out = np.array(a, dtype=dtype).reshape(shape)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a fixed world pose.

    Attributes:
        rotation: 3x3 orthonormal world-to-camera matrix.
        focal_length: focal length in image pixels.
        position: camera center in world coordinates.
        image_size: (width, height) of the nominal image, pixels.
        map_size: (width, height) of the keypoint-map grid, cells.
    """

    rotation: np.ndarray
    focal_length: float
    position: np.ndarray
    image_size: tuple
    map_size: tuple

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_readonly(self.rotation, (3, 3)))
        object.__setattr__(self, "position", _as_readonly(self.position, (3,)))
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "map_size", tuple(int(v) for v in self.map_size))
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"camera rotation is not orthonormal (deviation {err:.3g})")
        if not (self.focal_length > 0):
            raise ValueError("focal_length must be positive")
        if min(self.image_size) <= 0 or min(self.map_size) <= 0:
            raise ValueError("image_size and map_size must be positive")

    @classmethod
    def at_eye_height(cls, rotation, focal_length, image_size, map_size, height: float = 1.8):
        """Camera at standing eye height on the world origin's vertical."""
        return cls(rotation, focal_length, np.array([0.0, height, 0.0]), image_size, map_size)

    @classmethod
    def looking_at(cls, eye, target, focal_length, image_size, map_size):
        """Camera at `eye` aimed at `target`, image kept upright.

        The camera y axis points image-down (world-down for a level
        camera), so rendered maps read like images.
        """
        eye = np.asarray(eye, dtype=float)
        forward = np.asarray(target, dtype=float) - eye
        n = np.linalg.norm(forward)
        if n < 1e-12:
            raise ValueError("eye and target coincide")
        forward = forward / n
        up = np.array([0.0, 1.0, 0.0])
        right = np.cross(up, forward)
        rn = np.linalg.norm(right)
        if rn < 1e-9:
            raise ValueError("camera cannot look straight up or down")
        right /= rn
        cam_up = np.cross(forward, right)
        rotation = np.stack([right, -cam_up, forward])
        return cls(rotation, focal_length, eye, image_size, map_size)

    def scale_factors(self):
        """Per-axis image-pixel to map-cell scale."""
        return (self.map_size[0] / self.image_size[0], self.map_size[1] / self.image_size[1])

    def to_dict(self) -> dict:
        return {
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "focal_length": float(self.focal_length),
            "position": [float(v) for v in self.position],
            "image_size": list(self.image_size),
            "map_size": list(self.map_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            np.array(d["rotation"], dtype=float).reshape(3, 3),
            float(d["focal_length"]),
            np.array(d["position"], dtype=float),
            tuple(d["image_size"]),
            tuple(d["map_size"]),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Camera":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class PlacementParams:
    """Ground-plane pose plus shape parameters of one placed object.

    translation is (t_x, t_z); the vertical component is always zero
    because objects rest on the ground. azimuth is wrapped to [-pi, pi)
    on construction. deform holds the shape coefficients.
    """

    translation: np.ndarray
    azimuth: float
    scale: float
    deform: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "translation", _as_readonly(self.translation, (2,)))
        object.__setattr__(self, "azimuth", float(wrap_angle(self.azimuth)))
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "deform", _as_readonly(np.atleast_1d(np.asarray(self.deform, dtype=float)), (-1,)))
        if not (self.scale > 0):
            raise ValueError("scale must be positive")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.translation, [self.azimuth, self.scale], self.deform])

    @classmethod
    def from_vector(cls, x) -> "PlacementParams":
        x = np.asarray(x, dtype=float)
        return cls(x[:2], x[2], x[3], x[4:])

    def to_dict(self) -> dict:
        return {
            "translation": [float(v) for v in self.translation],
            "azimuth": float(self.azimuth),
            "scale": float(self.scale),
            "deform": [float(v) for v in self.deform],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlacementParams":
        return cls(np.array(d["translation"], dtype=float), float(d["azimuth"]),
                   float(d["scale"]), np.array(d["deform"], dtype=float))


@dataclass(frozen=True)
class OrientedBox:
    """Box free to rotate about the world up axis only."""

    center: np.ndarray
    half_extents: np.ndarray
    azimuth: float

    def __post_init__(self):
        object.__setattr__(self, "center", _as_readonly(self.center, (3,)))
        object.__setattr__(self, "half_extents", _as_readonly(self.half_extents, (3,)))
        object.__setattr__(self, "azimuth", float(wrap_angle(self.azimuth)))
        if not np.all(self.half_extents > 0):
            raise ValueError("half_extents must be strictly positive")

    def volume(self) -> float:
        return float(8.0 * np.prod(self.half_extents))

    def footprint_corners(self) -> np.ndarray:
        """(4, 2) world (x, z) corners of the ground-plane rectangle, CCW."""
        hx, _, hz = self.half_extents
        local = np.array([[-hx, -hz], [hx, -hz], [hx, hz], [-hx, hz]])
        return local @ rot2(self.azimuth).T + self.center[[0, 2]]

    def y_interval(self):
        return (float(self.center[1] - self.half_extents[1]),
                float(self.center[1] + self.half_extents[1]))

    def corners(self) -> np.ndarray:
        """(8, 3) world corners."""
        h = self.half_extents
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        local = signs * h
        return local @ rot_up(self.azimuth).T + self.center

    def to_dict(self) -> dict:
        return {
            "center": [float(v) for v in self.center],
            "half_extents": [float(v) for v in self.half_extents],
            "azimuth": float(self.azimuth),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OrientedBox":
        return cls(np.array(d["center"], dtype=float),
                   np.array(d["half_extents"], dtype=float), float(d["azimuth"]))


def project(camera: Camera, point) -> np.ndarray:
    """Project one world point to continuous map-grid coordinates.

    Raises PointBehindCamera unless the point lies strictly in front
    (camera-frame depth > 1e-6). Coordinates may fall outside the grid.
    """
    c = camera.rotation @ (np.asarray(point, dtype=float) - camera.position)
    if not (c[2] > MIN_PROJECTION_DEPTH):
        raise PointBehindCamera(f"depth {c[2]:.3g} is not in front of the camera")
    sx, sy = camera.scale_factors()
    u = 0.5 * camera.image_size[0] + camera.focal_length * c[0] / c[2]
    v = 0.5 * camera.image_size[1] + camera.focal_length * c[1] / c[2]
    return np.array([u * sx, v * sy])


def project_points(camera: Camera, points: np.ndarray):
    """Vectorized projection of (..., 3) points.

    Returns (coords (..., 2), in_front (...,) bool). Points behind the
    camera get NaN coordinates instead of raising; callers that need
    the strict behavior use `project`.
    """
    pts = np.asarray(points, dtype=float)
    c = (pts - camera.position) @ camera.rotation.T
    depth = c[..., 2]
    ok = depth > MIN_PROJECTION_DEPTH
    safe = np.where(ok, depth, 1.0)
    sx, sy = camera.scale_factors()
    u = (0.5 * camera.image_size[0] + camera.focal_length * c[..., 0] / safe) * sx
    v = (0.5 * camera.image_size[1] + camera.focal_length * c[..., 1] / safe) * sy
    out = np.stack([u, v], axis=-1)
    out[~ok] = np.nan
    return out, ok


def place_keypoints(keypoints: np.ndarray, params: PlacementParams) -> np.ndarray:
    """Apply scale, azimuth rotation, then ground-plane translation.

    Input (N, 3) canonical keypoints; output (N, 3) world keypoints.
    The vertical translation component is zero, so heights transform
    as y_world = scale * y_canonical.
    """
    k = np.asarray(keypoints, dtype=float)
    t = np.array([params.translation[0], 0.0, params.translation[1]])
    return (params.scale * k) @ rot_up(params.azimuth).T + t


def _clip_polygon_halfplane(poly, a, b):
    # Keep the side of the directed edge a->b that lies to its left.
    d = b - a
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        sp = d[0] * (p[1] - a[1]) - d[1] * (p[0] - a[0])
        sq = d[0] * (q[1] - a[1]) - d[1] * (q[0] - a[0])
        if sp >= -1e-12:
            out.append(p)
        if (sp > 1e-12 and sq < -1e-12) or (sp < -1e-12 and sq > 1e-12):
            t = sp / (sp - sq)
            out.append(p + t * (q - p))
    return out


def _convex_intersection_area(rect_a, rect_b) -> float:
    poly = [np.asarray(p, dtype=float) for p in rect_a]
    for i in range(4):
        if not poly:
            return 0.0
        poly = _clip_polygon_halfplane(poly, rect_b[i], rect_b[(i + 1) % 4])
    if len(poly) < 3:
        return 0.0
    pts = np.asarray(poly)
    x, z = pts[:, 0], pts[:, 1]
    return float(0.5 * abs(np.dot(x, np.roll(z, -1)) - np.dot(z, np.roll(x, -1))))


def obb_iou_3d(a: OrientedBox, b: OrientedBox) -> float:
    """Exact intersection-over-union of two up-axis-aligned boxes.

    Rotation about +y only, so the volume factors into the footprint
    polygon overlap times the vertical interval overlap.
    """
    lo = max(a.y_interval()[0], b.y_interval()[0])
    hi = min(a.y_interval()[1], b.y_interval()[1])
    dy = hi - lo
    if dy <= 0:
        return 0.0
    area = _convex_intersection_area(a.footprint_corners(), b.footprint_corners())
    inter = area * dy
    union = a.volume() + b.volume() - inter
    if union <= 0:
        return 0.0
    # Clipping roundoff can push the ratio a few ulp past 1.
    return float(min(max(inter / union, 0.0), 1.0))


def obb_intersects(a: OrientedBox, b: OrientedBox, shrink: float = 0.9) -> bool:
    """Separating-axis overlap test on conservatively shrunk boxes.

    Half extents are scaled by `shrink` before testing so that grazing
    contact between neighbors does not count as a collision.
    """
    ha = a.half_extents * shrink
    hb = b.half_extents * shrink
    # Vertical axis first.
    if abs(a.center[1] - b.center[1]) >= ha[1] + hb[1]:
        return False
    ca, cb = a.center[[0, 2]], b.center[[0, 2]]
    d = cb - ca
    axes = []
    for box in (a, b):
        r = rot2(box.azimuth)
        axes.append(r[:, 0])
        axes.append(r[:, 1])
    ra2 = np.array([ha[0], ha[2]])
    rb2 = np.array([hb[0], hb[2]])
    ua = rot2(a.azimuth)
    ub = rot2(b.azimuth)
    for ax in axes:
        proj_a = abs(ax @ ua[:, 0]) * ra2[0] + abs(ax @ ua[:, 1]) * ra2[1]
        proj_b = abs(ax @ ub[:, 0]) * rb2[0] + abs(ax @ ub[:, 1]) * rb2[1]
        if abs(ax @ d) >= proj_a + proj_b:
            return False
    return True
