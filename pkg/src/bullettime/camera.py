"""Pinhole cameras: ray casting, projection, reference-view selection.

Conventions: `rotation` maps world to camera coordinates, `translation` is
expressed in the camera frame (x_cam = R x_world + t), +z looks forward.
Pixel coordinates are continuous; integer pixel (i, j) has its center at
(i + 0.5, j + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-6


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive: {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx},{self.cy}) outside "
                f"{self.width}x{self.height} frame"
            )
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-4:
            raise ValueError(f"rotation is not orthonormal (max error {err:.2e})")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-4:
            raise ValueError("rotation must have determinant +1")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        """Unit viewing direction (+z of the camera frame) in world coords."""
        return self.rotation[2, :].copy()

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
        }

    @staticmethod
    def from_json(d: dict) -> "Camera":
        return Camera(
            fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
            width=d["width"], height=d["height"],
            rotation=np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.array(d["translation"], dtype=np.float64),
        )


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    depth_hint: float | None = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not (0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got [{self.near}, {self.far}]")
        if self.depth_hint is not None and not (
            self.near <= self.depth_hint <= self.far
        ):
            raise ValueError(
                f"depth hint {self.depth_hint} outside [{self.near}, {self.far}]"
            )


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera rotation + translation for a camera at `eye` looking
    at `target`. Falls back to a z-up reference when the view direction is
    parallel to `up`."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(fwd, up)) > 0.999:
        up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])  # rows: camera x, y, z in world
    return rot, -rot @ eye


def ray_for_pixel(cam: Camera, px: float, py: float, near: float, far: float) -> Ray:
    """Ray from the camera center through continuous pixel (px, py)."""
    if not (0 <= px < cam.width and 0 <= py < cam.height):
        raise ValueError(
            f"pixel ({px},{py}) outside frame {cam.width}x{cam.height}"
        )
    d_cam = np.array([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, 1.0])
    d_world = cam.rotation.T @ d_cam
    d_world /= np.linalg.norm(d_world)
    return Ray(origin=cam.center, direction=d_world, near=near, far=far)


def rays_for_pixels(cam: Camera, px: np.ndarray, py: np.ndarray):
    """Vectorized ray directions for arrays of pixel coordinates.

    Returns (origins (N,3), directions (N,3)); origins are all the camera
    center, repeated for convenience.
    """
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    d_cam = np.stack(
        [(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, np.ones_like(px)], axis=-1
    )
    d_world = d_cam @ cam.rotation  # == (R^T @ d_cam^T)^T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(cam.center, d_world.shape).copy()
    return origins, d_world


def project(cam: Camera, p_world) -> tuple[float, float, float]:
    """Project a world point; returns (u, v, depth). Depth may be negative;
    callers decide what to do with points behind the camera."""
    p = cam.rotation @ np.asarray(p_world, dtype=np.float64) + cam.translation
    z = p[2]
    if z == 0.0:
        z = 1e-12
    return (cam.fx * p[0] / z + cam.cx, cam.fy * p[1] / z + cam.cy, p[2])


def project_points(cam: Camera, pts: np.ndarray):
    """Vectorized projection of (N,3) world points -> (u (N,), v (N,), z (N,))."""
    p = pts @ cam.rotation.T + cam.translation
    z = p[:, 2]
    zs = np.where(z == 0.0, 1e-12, z)
    return cam.fx * p[:, 0] / zs + cam.cx, cam.fy * p[:, 1] / zs + cam.cy, z


def selection_scores(target: Camera, pool: list) -> np.ndarray:
    """Blend of normalized center distance and view-angle disagreement."""
    centers = np.stack([c.center for c in pool])
    diam = 0.0
    for i in range(len(pool)):
        d = np.linalg.norm(centers - centers[i], axis=1).max()
        diam = max(diam, d)
    diam = max(diam, 1e-9)
    dist = np.linalg.norm(centers - target.center, axis=1) / diam
    axes = np.stack([c.optical_axis for c in pool])
    cos = axes @ target.optical_axis
    return dist + (1.0 - cos)


def select_reference_cameras(target: Camera, pool: list, k: int) -> list[int]:
    """Indices of the K pool cameras closest to the target view, best first.

    Ties break toward the lower index. Scores are quantized to 1e-9 before
    ordering so symmetric rigs rank identically under a global rigid motion
    of rig and target (raw float ties would flip with rounding noise).
    """
    if not pool:
        raise ValueError("camera pool is empty")
    if not (1 <= k <= len(pool)):
        raise ValueError(f"K={k} outside [1, {len(pool)}]")
    scores = np.round(selection_scores(target, pool) / 1e-9) * 1e-9
    order = sorted(range(len(pool)), key=lambda i: (scores[i], i))
    return order[:k]
