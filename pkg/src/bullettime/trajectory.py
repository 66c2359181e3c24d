"""Bullet-time camera paths: keyframes, presets, pose interpolation and
per-trajectory reference-camera resolution.

Keyframe rotations are camera-to-world unit quaternions (w, x, y, z);
positions are camera centers in world space. `frame_time` is fractional so
a path can freeze, stretch or sweep scene time independently of the camera
motion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, select_reference_cameras


# -- quaternion helpers --------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Camera-to-world rotation matrix from a unit quaternion."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                      (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                      0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return quat_normalize(q)


def slerp(q0: np.ndarray, q1: np.ndarray, tau: float) -> np.ndarray:
    """Spherical interpolation with shortest-arc sign correction."""
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > 0.9995:
        return quat_normalize(q0 + tau * (q1 - q0))
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    s = np.sin(theta)
    return (np.sin((1 - tau) * theta) * q0 + np.sin(tau * theta) * q1) / s


# -- keyframes and trajectories -------------------------------------------------

@dataclass
class Keyframe:
    position: np.ndarray
    quaternion: np.ndarray      # camera-to-world, (w, x, y, z)
    frame_time: float
    fov: float | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.quaternion = np.asarray(self.quaternion, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(self.quaternion) - 1.0) > 1e-6:
            raise ValueError("keyframe quaternion must be unit norm")

    def to_json(self) -> dict:
        d = {
            "position": [float(v) for v in self.position],
            "quaternion": [float(v) for v in self.quaternion],
            "frame_time": float(self.frame_time),
        }
        if self.fov is not None:
            d["fov"] = float(self.fov)
        return d

    @staticmethod
    def from_json(d: dict) -> "Keyframe":
        return Keyframe(
            position=np.array(d["position"]),
            quaternion=quat_normalize(np.array(d["quaternion"])),
            frame_time=d["frame_time"], fov=d.get("fov"),
        )


@dataclass
class Trajectory:
    keyframes: list[Keyframe]
    mode: str = "linear"            # "linear" | "smooth"
    samples_per_segment: int = 4
    name: str = "trajectory"

    def __post_init__(self):
        if len(self.keyframes) < 2:
            raise ValueError("a trajectory needs at least 2 keyframes")
        if self.mode not in ("linear", "smooth"):
            raise ValueError(f"unknown interpolation mode {self.mode!r}")

    @property
    def n_stops(self) -> int:
        return self.samples_per_segment * (len(self.keyframes) - 1)

    def to_json(self) -> dict:
        return {
            "name": self.name, "mode": self.mode,
            "samples_per_segment": self.samples_per_segment,
            "keyframes": [k.to_json() for k in self.keyframes],
        }

    @staticmethod
    def from_json(d: dict) -> "Trajectory":
        return Trajectory(
            keyframes=[Keyframe.from_json(k) for k in d["keyframes"]],
            mode=d.get("mode", "linear"),
            samples_per_segment=d.get("samples_per_segment", 4),
            name=d.get("name", "trajectory"),
        )


def _catmull_rom(p0, p1, p2, p3, tau: float) -> np.ndarray:
    t2 = tau * tau
    t3 = t2 * tau
    return 0.5 * (
        2 * p1 + (-p0 + p2) * tau
        + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t2
        + (-p0 + 3 * p1 - 3 * p2 + p3) * t3
    )


def interpolate(traj: Trajectory, u: float):
    """Pose + scene time at path parameter u in [0, 1].

    Returns (position, quaternion, frame_time, fov). u = 0 and u = 1
    reproduce the end keyframes exactly.
    """
    if not (0.0 <= u <= 1.0):
        raise ValueError(f"path parameter {u} outside [0, 1]")
    keys = traj.keyframes
    nseg = len(keys) - 1
    if u == 0.0:
        k = keys[0]
        return k.position.copy(), k.quaternion.copy(), k.frame_time, k.fov
    if u == 1.0:
        k = keys[-1]
        return k.position.copy(), k.quaternion.copy(), k.frame_time, k.fov
    s = u * nseg
    i = min(int(np.floor(s)), nseg - 1)
    tau = s - i
    a, b = keys[i], keys[i + 1]
    if traj.mode == "smooth":
        p0 = keys[max(i - 1, 0)].position
        p3 = keys[min(i + 2, nseg)].position
        pos = _catmull_rom(p0, a.position, b.position, p3, tau)
    else:
        pos = (1 - tau) * a.position + tau * b.position
    quat = slerp(a.quaternion, b.quaternion, tau)
    ft = (1 - tau) * a.frame_time + tau * b.frame_time
    fov = a.fov if a.fov is not None else b.fov
    return pos, quat, ft, fov


def pose_to_camera(position, quaternion, template: Camera,
                   fov: float | None = None) -> Camera:
    """Build a Camera at the interpolated pose, borrowing intrinsics from a
    rig camera; an fov override (degrees, horizontal) replaces the focals."""
    r_c2w = quat_to_matrix(quat_normalize(quaternion))
    rot = r_c2w.T
    trans = -rot @ np.asarray(position, dtype=np.float64)
    fx, fy = template.fx, template.fy
    if fov is not None:
        fx = fy = (template.width / 2.0) / np.tan(np.radians(fov) / 2.0)
    return Camera(
        fx=fx, fy=fy, cx=template.cx, cy=template.cy,
        width=template.width, height=template.height,
        rotation=rot, translation=trans,
    )


def camera_at(traj: Trajectory, u: float, template: Camera
              ) -> tuple[Camera, float]:
    pos, quat, ft, fov = interpolate(traj, u)
    return pose_to_camera(pos, quat, template, fov), ft


def preset_orbit(center, radius: float, height: float, n_keys: int,
                 frame_span: float, name: str = "orbit") -> Trajectory:
    """Keyframes on a circle around `center`, each looking at it, with
    frame_time swept linearly over [0, frame_span] (0 = frozen time)."""
    if n_keys < 2:
        raise ValueError("an orbit needs at least 2 keyframes")
    center = np.asarray(center, dtype=np.float64)
    keys = []
    from .camera import look_at
    for i in range(n_keys):
        a = 2.0 * np.pi * i / n_keys
        eye = center + np.array(
            [radius * np.cos(a), height, radius * np.sin(a)]
        )
        rot, _ = look_at(eye, center)
        keys.append(Keyframe(
            position=eye, quaternion=matrix_to_quat(rot.T),
            frame_time=frame_span * i / max(n_keys - 1, 1),
        ))
    return Trajectory(keyframes=keys, mode="smooth", name=name)


def related_cameras(traj: Trajectory, rig: list[Camera], k: int,
                    n_stops: int, template: Camera | None = None
                    ) -> list[list[int]]:
    """Reference-camera sets for n_stops evenly spaced path positions."""
    if n_stops < 1:
        raise ValueError("need at least one stop")
    template = template or rig[0]
    out = []
    for u in np.linspace(0.0, 1.0, n_stops):
        cam, _ = camera_at(traj, float(u), template)
        out.append(select_reference_cameras(cam, rig, k))
    return out


def frame_camera_plan(traj: Trajectory, rig: list[Camera], k: int,
                      n_stops: int, template: Camera | None = None) -> dict:
    """One K-set of reference cameras per dataset frame the path touches.

    Stops are grouped by their rounded frame time; each frame resolves its
    references once, from the stop nearest the group's middle. This is the
    set refinement is allowed to read for that frame.
    """
    template = template or rig[0]
    stops = []
    for u in np.linspace(0.0, 1.0, n_stops):
        cam, ft = camera_at(traj, float(u), template)
        stops.append((float(u), cam, int(np.floor(ft + 0.5))))
    plan: dict[int, list[int]] = {}
    for t in sorted({s[2] for s in stops}):
        group = [s for s in stops if s[2] == t]
        mid = group[len(group) // 2]
        plan[t] = select_reference_cameras(mid[1], rig, k)
    return plan


# -- persistence -----------------------------------------------------------------

def save_trajectory(traj: Trajectory, path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(traj.to_json(), f, indent=2, sort_keys=True)
    import os
    os.replace(tmp, path)


def load_trajectory(path: str) -> Trajectory:
    with open(path) as f:
        return Trajectory.from_json(json.load(f))
