"""Pinhole cameras and the world-to-proxy-space normalization.

Pixel convention: (0, 0) is the center of the top-left pixel; x grows right,
y grows down. Camera space looks down +z, so depth is positive in front of
the camera.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import TriangleMesh


class BehindCameraError(ValueError):
    """Raised when projecting a point with nonpositive camera-space depth."""


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray      # (3, 3) world -> camera
    translation: np.ndarray   # (3,) meters
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        rtr = self.rotation.T @ self.rotation
        if not np.allclose(rtr, np.eye(3), atol=1e-6) or \
                abs(np.linalg.det(self.rotation) - 1) > 1e-6:
            raise ValueError("rotation must be orthonormal with det 1")

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.rotation.T + self.translation

    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def scaled(self, factor: float) -> "Camera":
        """Same view at a different image resolution.

        Keeps pixel centers aligned: pixel x at the new scale maps to
        (x + 0.5) / factor - 0.5 at the old one.
        """
        return Camera(self.fx * factor, self.fy * factor,
                      (self.cx + 0.5) * factor - 0.5,
                      (self.cy + 0.5) * factor - 0.5,
                      self.rotation.copy(), self.translation.copy(),
                      int(round(self.width * factor)), int(round(self.height * factor)))


def project(camera: Camera, point) -> tuple[np.ndarray, float]:
    """Project one world point; returns (pixel coords, camera-space depth)."""
    pc = camera.to_camera(point)[0]
    if pc[2] <= 0:
        raise BehindCameraError(f"point has camera-space depth {pc[2]:.4g}")
    x = camera.fx * pc[0] / pc[2] + camera.cx
    y = camera.fy * pc[1] / pc[2] + camera.cy
    return np.array([x, y]), float(pc[2])


def project_points(camera: Camera, points: np.ndarray,
                   allow_behind: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns ((N, 2) pixels, (N,) depths)."""
    pc = camera.to_camera(points)
    z = pc[:, 2]
    if not allow_behind and (z <= 0).any():
        raise BehindCameraError(f"{int((z <= 0).sum())} points behind the camera")
    safe_z = np.where(z > 0, z, 1.0)
    xy = np.stack([camera.fx * pc[:, 0] / safe_z + camera.cx,
                   camera.fy * pc[:, 1] / safe_z + camera.cy], axis=1)
    return xy, z


@dataclass
class ProxySpaceTransform:
    """Similarity transform mapping world coordinates into the proxy's unit
    cube: p = scale * x + offset."""

    scale: float
    offset: np.ndarray

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(3)
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def to_proxy(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + self.offset

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.offset) / self.scale

    def mesh_to_proxy(self, mesh: TriangleMesh) -> TriangleMesh:
        return mesh.transformed(self.scale, self.offset)

    def mesh_to_world(self, mesh: TriangleMesh) -> TriangleMesh:
        return mesh.transformed(1.0 / self.scale, -self.offset / self.scale)


def fit_proxy_transform(proxy_mesh: TriangleMesh, margin: float = 0.05) -> ProxySpaceTransform:
    """Isotropic fit of the mesh bounding box into [0,1]^3, centered, with the
    longest axis spanning 1 - 2*margin."""
    lo, hi = proxy_mesh.bounding_box()
    extent = hi - lo
    longest = float(extent.max())
    if longest <= 0:
        raise ValueError("degenerate bounding box")
    if not 0 <= margin < 0.5:
        raise ValueError("margin must be in [0, 0.5)")
    scale = (1.0 - 2.0 * margin) / longest
    center = 0.5 * (lo + hi)
    offset = 0.5 - scale * center
    return ProxySpaceTransform(scale, offset)


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World->camera rotation and translation for a camera at ``eye`` looking
    at ``target`` (camera +z forward, +y down in image space)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - eye
    n = np.linalg.norm(forward)
    if n < 1e-12:
        raise ValueError("eye and target coincide")
    forward /= n
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        # forward parallel to up: pick another hint
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        rn = np.linalg.norm(right)
    right /= rn
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    translation = -rotation @ eye
    return rotation, translation


def camera_ring(n: int, radius: float, height: float, target,
                fx: float = 550.0, fy: float | None = None,
                width: int = 512, height_px: int = 512) -> list[Camera]:
    """n cameras evenly spaced in azimuth on a circle of the given radius and
    height, all looking at ``target``."""
    if n < 1:
        raise ValueError("need at least one camera")
    if fy is None:
        fy = fx
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for i in range(n):
        az = 2 * np.pi * i / n
        eye = np.array([target[0] + radius * np.cos(az),
                        height,
                        target[2] + radius * np.sin(az)])
        R, t = look_at(eye, target)
        cams.append(Camera(fx, fy, (width - 1) / 2.0, (height_px - 1) / 2.0,
                           R, t, width, height_px))
    return cams


def save_cameras(cameras: list[Camera], path) -> None:
    """JSON array of {fx, fy, cx, cy, width, height, R (9 row-major), t}."""
    records = []
    for c in cameras:
        records.append({
            "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
            "width": c.width, "height": c.height,
            "R": [float(v) for v in c.rotation.reshape(-1)],
            "t": [float(v) for v in c.translation],
        })
    with open(path, "w") as fh:
        json.dump(records, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_cameras(path) -> list[Camera]:
    with open(path) as fh:
        records = json.load(fh)
    return [Camera(r["fx"], r["fy"], r["cx"], r["cy"],
                   np.array(r["R"], dtype=np.float64).reshape(3, 3),
                   np.array(r["t"], dtype=np.float64),
                   int(r["width"]), int(r["height"])) for r in records]
