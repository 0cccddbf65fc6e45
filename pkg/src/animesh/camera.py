"""Pinhole/orthographic cameras and binary silhouette rasterization.

Coordinates are right-handed and Y-up. Cameras look at ``target`` (the
origin by default). Image rows grow downward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .deform import KeyframeSequence
from .errors import ValidationError

NEAR = 1e-3


@dataclass(frozen=True)
class Camera:
    position: tuple[float, float, float]
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    fov_deg: float = 40.0
    image_size: tuple[int, int] = (64, 64)  # (height, width)
    orthographic: bool = False
    ortho_half_height: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.fov_deg < 180.0:
            raise ValidationError(f"fov must lie in (0, 180) degrees, got {self.fov_deg}")
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ValidationError(f"image size must be at least 16x16, got {self.image_size}")
        if self.orthographic and not self.ortho_half_height > 0:
            raise ValidationError("ortho_half_height must be positive")
        self.basis()

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(np.subtract(self.target, self.position)))

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(right, up, forward)`` orthonormal camera axes."""
        fwd = np.subtract(self.target, self.position).astype(float)
        n = np.linalg.norm(fwd)
        if n < 1e-12:
            raise ValidationError("degenerate camera basis: position coincides with target")
        fwd /= n
        right = np.cross(fwd, np.asarray(self.up, dtype=float))
        rn = np.linalg.norm(right)
        if rn < 1e-9:
            raise ValidationError("degenerate camera basis: up vector is parallel to the view direction")
        right /= rn
        return right, np.cross(right, fwd), fwd

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates ``(n, 2)`` as (column, row) and view depth ``(n,)``."""
        right, up, fwd = self.basis()
        rel = np.asarray(points, dtype=float) - np.asarray(self.position, dtype=float)
        x, y, z = rel @ right, rel @ up, rel @ fwd
        h, w = self.image_size
        aspect = w / h
        if self.orthographic:
            nx, ny = x / (self.ortho_half_height * aspect), y / self.ortho_half_height
        else:
            f = np.tan(np.radians(self.fov_deg) / 2.0)
            zz = np.where(z > NEAR, z, np.inf)
            nx, ny = x / (zz * f * aspect), y / (zz * f)
        return np.stack([(nx + 1.0) * 0.5 * w, (1.0 - ny) * 0.5 * h], axis=1), z


def rasterize(camera: Camera, vertices, faces) -> np.ndarray:
    """Binary coverage mask: a pixel is set when its center lies inside (or on) a projected triangle."""
    h, w = camera.image_size
    mask = np.zeros((h, w), dtype=bool)
    pix, depth = camera.project(vertices)
    faces = np.asarray(faces)
    tri = pix[faces]  # (F, 3, 2)
    visible = np.all(depth[faces] > (-np.inf if camera.orthographic else NEAR), axis=1)
    lo = np.floor(tri.min(axis=1) - 0.5).astype(np.int64)
    hi = np.ceil(tri.max(axis=1) - 0.5).astype(np.int64)
    visible &= (hi[:, 0] >= 0) & (lo[:, 0] < w) & (hi[:, 1] >= 0) & (lo[:, 1] < h)
    for f in np.nonzero(visible)[0]:
        x0, y0 = max(lo[f, 0], 0), max(lo[f, 1], 0)
        x1, y1 = min(hi[f, 0], w - 1), min(hi[f, 1], h - 1)
        if x1 < x0 or y1 < y0:
            continue
        (ax, ay), (bx, by), (cx, cy) = tri[f]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        px = np.arange(x0, x1 + 1) + 0.5
        py = (np.arange(y0, y1 + 1) + 0.5)[:, None]
        e0 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        e1 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
        e2 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
        if area > 0:
            inside = (e0 >= 0) & (e1 >= 0) & (e2 >= 0)
        else:
            inside = (e0 <= 0) & (e1 <= 0) & (e2 <= 0)
        mask[y0:y1 + 1, x0:x1 + 1] |= inside
    return mask


def render_silhouette(frames: KeyframeSequence, camera: Camera) -> np.ndarray:
    """Per-frame binary masks ``(N, height, width)``."""
    return np.stack([rasterize(camera, frames.frames[n], frames.faces) for n in range(frames.n_frames)])


@dataclass(frozen=True)
class CameraRanges:
    """Uniform sampling ranges; angles in degrees."""

    fov: tuple[float, float] = (15.0, 60.0)
    elevation: tuple[float, float] = (10.0, 45.0)
    azimuth: tuple[float, float] = (0.0, 360.0)
    distance: tuple[float, float] = (2.5, 3.0)

    def __post_init__(self):
        for name in ("fov", "elevation", "azimuth", "distance"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValidationError(f"camera {name} range is inverted: [{lo}, {hi}]")


def orbit_position(elevation_deg: float, azimuth_deg: float, distance: float) -> tuple[float, float, float]:
    el, az = np.radians(elevation_deg), np.radians(azimuth_deg)
    return (float(distance * np.cos(el) * np.cos(az)),
            float(distance * np.sin(el)),
            float(distance * np.cos(el) * np.sin(az)))


def sample_camera(rng, ranges: CameraRanges = CameraRanges(), image_size=(64, 64)) -> Camera:
    """Perspective camera on a sphere around the origin, looking at it."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    fov = rng.uniform(*ranges.fov)
    elv = rng.uniform(*ranges.elevation)
    azm = rng.uniform(*ranges.azimuth)
    dist = rng.uniform(*ranges.distance)
    if ranges.azimuth[1] - ranges.azimuth[0] >= 360.0:
        azm = azm % 360.0
    return Camera(orbit_position(elv, azm, dist), fov_deg=float(fov), image_size=tuple(image_size))
