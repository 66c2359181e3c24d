"""Analytic time-varying test scene: ground-truth radiance oracle and
multi-view dataset generation/loading.

The scene is a handful of soft-edged moving spheres inside a unit stage
box. Density falls off with a smoothstep over the last `softness` units of
each radius, so every (sigma, color) query has a closed form and rendered
images converge as the sample count grows. Datasets are written as 8-bit
PNGs plus per-frame camera JSON; masks threshold the oracle's accumulated
opacity at 0.5.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field as dc_field

import numpy as np
from PIL import Image

from .camera import Camera, look_at, rays_for_pixels
from .renderer import composite
from .sampling import compute_deltas, dense_stratified_batch
from .tensor import no_grad


@dataclass
class Primitive:
    kind: str                  # "static" | "orbit" | "bob"
    base: np.ndarray           # anchor position
    radius: float
    color: np.ndarray
    sigma0: float
    softness: float
    amplitude: float = 0.0     # orbit radius / bob amplitude
    period: float = 8.0        # frames per cycle
    phase: float = 0.0

    def center(self, t: float) -> np.ndarray:
        w = 2.0 * np.pi * t / self.period + self.phase
        if self.kind == "orbit":
            return self.base + self.amplitude * np.array(
                [np.cos(w), 0.0, np.sin(w)]
            )
        if self.kind == "bob":
            return self.base + np.array([0.0, self.amplitude * np.sin(w), 0.0])
        return self.base

    def to_json(self) -> dict:
        return {
            "kind": self.kind, "base": list(map(float, self.base)),
            "radius": self.radius, "color": list(map(float, self.color)),
            "sigma0": self.sigma0, "softness": self.softness,
            "amplitude": self.amplitude, "period": self.period,
            "phase": self.phase,
        }

    @staticmethod
    def from_json(d: dict) -> "Primitive":
        return Primitive(
            kind=d["kind"], base=np.array(d["base"]), radius=d["radius"],
            color=np.array(d["color"]), sigma0=d["sigma0"],
            softness=d["softness"], amplitude=d.get("amplitude", 0.0),
            period=d.get("period", 8.0), phase=d.get("phase", 0.0),
        )


@dataclass
class AnalyticScene:
    primitives: list[Primitive]
    box_min: np.ndarray
    box_max: np.ndarray
    frame_count: int
    background: np.ndarray
    seed: int = 42

    def __post_init__(self):
        self.box_min = np.asarray(self.box_min, dtype=np.float64)
        self.box_max = np.asarray(self.box_max, dtype=np.float64)
        self.background = np.asarray(self.background, dtype=np.float32)
        for p in self.primitives:
            for t in range(self.frame_count):
                c = p.center(t)
                if (c < self.box_min).any() or (c > self.box_max).any():
                    raise ValueError(
                        f"primitive leaves the stage box at frame {t}"
                    )

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "frame_count": self.frame_count,
            "background": list(map(float, self.background)),
            "box_min": list(map(float, self.box_min)),
            "box_max": list(map(float, self.box_max)),
            "primitives": [p.to_json() for p in self.primitives],
        }

    @staticmethod
    def from_json(d: dict) -> "AnalyticScene":
        return AnalyticScene(
            primitives=[Primitive.from_json(p) for p in d["primitives"]],
            box_min=np.array(d["box_min"]), box_max=np.array(d["box_max"]),
            frame_count=d["frame_count"],
            background=np.array(d["background"]), seed=d["seed"],
        )


def field(scene: AnalyticScene, points, t: float):
    """Density + color at world points for frame t.

    sigma is the sum over primitives of sigma0 * smoothstep((R - d)/s);
    color is the sigma-weighted mean of primitive colors (zero outside all
    supports, where it never matters).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    sigma = np.zeros(len(pts), dtype=np.float64)
    csum = np.zeros((len(pts), 3), dtype=np.float64)
    for prim in scene.primitives:
        d = np.linalg.norm(pts - prim.center(t), axis=1)
        u = np.clip((prim.radius - d) / prim.softness, 0.0, 1.0)
        s = prim.sigma0 * (3.0 * u * u - 2.0 * u ** 3)
        sigma += s
        csum += s[:, None] * prim.color
    color = np.where(
        sigma[:, None] > 0.0, csum / np.maximum(sigma[:, None], 1e-12), 0.0
    )
    return sigma.astype(np.float32), color.astype(np.float32)


def near_far_for_camera(cam: Camera, box_min, box_max) -> tuple[float, float]:
    """Conservative near/far from the camera center to the stage box."""
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    c = cam.center
    closest = np.clip(c, box_min, box_max)
    d_near = np.linalg.norm(closest - c)
    corners = np.array(
        [[box_min[i] if b & (1 << i) == 0 else box_max[i] for i in range(3)]
         for b in range(8)]
    )
    d_far = np.linalg.norm(corners - c, axis=1).max()
    return max(0.05, 0.95 * d_near), 1.05 * d_far


def oracle_render(scene: AnalyticScene, cam: Camera, t: float,
                  n_dense: int = 256, chunk: int = 4096):
    """Ground-truth render by dense midpoint sampling of the analytic field.

    Returns (image (H,W,3) in [0,1], opacity (H,W)). Deterministic: the
    stratified sampler degenerates to bin centers (rng=None).
    """
    if n_dense < 64:
        raise ValueError("oracle rendering needs n_dense >= 64")
    near, far = near_far_for_camera(cam, scene.box_min, scene.box_max)
    h, w = cam.height, cam.width
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    origins, dirs = rays_for_pixels(cam, xs.ravel(), ys.ravel())
    img = np.empty((h * w, 3), dtype=np.float32)
    op = np.empty(h * w, dtype=np.float32)
    with no_grad():
        for a in range(0, h * w, chunk):
            b = min(a + chunk, h * w)
            depths = dense_stratified_batch(
                np.full(b - a, near, np.float32),
                np.full(b - a, far, np.float32), n_dense, rng=None,
            )
            deltas = compute_deltas(depths, far - near)
            pts = origins[a:b, None, :] + depths[:, :, None] * dirs[a:b, None, :]
            sig, col = field(scene, pts.reshape(-1, 3), t)
            out, alpha, _, _ = composite(
                deltas, sig.reshape(b - a, n_dense),
                col.reshape(b - a, n_dense, 3), scene.background,
            )
            img[a:b] = out.data
            op[a:b] = alpha.data
    return img.reshape(h, w, 3), op.reshape(h, w)


def oracle_field_fn(scene: AnalyticScene, t: float):
    """Adapter so the neural renderer's machinery can run on ground truth."""
    def fn(points):
        return field(scene, points, t)
    return fn


# ---------------------------------------------------------------------------
# the standard test scene
# ---------------------------------------------------------------------------

def standard_scene(seed: int = 42) -> AnalyticScene:
    """Three soft spheres (static / orbiting / bobbing), 8 frames.

    The spheres sit at similar heights so the gaps between them stay
    horizontal: a camera ring can only carve gaps it can see through, and
    vertical stacking would leave uncarvable webbing in the visual hull.
    """
    prims = [
        Primitive(kind="static", base=np.array([0.28, 0.0, 0.12]),
                  radius=0.15, color=np.array([0.85, 0.25, 0.20]),
                  sigma0=80.0, softness=0.05),
        Primitive(kind="orbit", base=np.array([-0.10, 0.04, -0.06]),
                  radius=0.12, color=np.array([0.20, 0.70, 0.30]),
                  sigma0=80.0, softness=0.04, amplitude=0.16, period=16.0,
                  phase=0.5),
        Primitive(kind="bob", base=np.array([-0.22, -0.04, 0.30]),
                  radius=0.12, color=np.array([0.25, 0.35, 0.85]),
                  sigma0=80.0, softness=0.04, amplitude=0.07, period=16.0),
    ]
    return AnalyticScene(
        primitives=prims,
        box_min=np.array([-0.5, -0.5, -0.5]),
        box_max=np.array([0.5, 0.5, 0.5]),
        frame_count=8,
        background=np.array([0.05, 0.05, 0.07]),
        seed=seed,
    )


def tiny_scene(seed: int = 7) -> AnalyticScene:
    """Two spheres, three frames: keeps oracle renders in the second range
    (used by the test suite and quick demos)."""
    prims = [
        Primitive(kind="static", base=np.array([0.18, 0.0, 0.05]),
                  radius=0.16, color=np.array([0.8, 0.3, 0.2]),
                  sigma0=80.0, softness=0.05),
        Primitive(kind="orbit", base=np.array([-0.15, 0.03, -0.05]),
                  radius=0.12, color=np.array([0.2, 0.4, 0.8]),
                  sigma0=80.0, softness=0.04, amplitude=0.1, period=8.0),
    ]
    return AnalyticScene(
        primitives=prims, box_min=np.array([-0.5] * 3),
        box_max=np.array([0.5] * 3), frame_count=3,
        background=np.array([0.05, 0.05, 0.07]), seed=seed,
    )


def tiny_rig(n: int = 6) -> list:
    return ring_rig(n_cameras=n, radius=3.0, width=48, height_px=36,
                    focal=86.0)


def ring_rig(n_cameras: int = 12, radius: float = 3.0,
             tier_high: float = 1.3, tier_low: float = -0.5,
             width: int = 128, height_px: int = 96, focal: float = 230.0
             ) -> list[Camera]:
    """Evenly spaced cameras on a ring of the given radius, all looking at
    the origin, alternating between two heights.

    A single-height ring cannot carve the vertical gaps and caps of a
    visual hull (no ray ever looks across them); alternating elevations
    keeps the hull tight above and below the subjects.
    """
    cams = []
    for i in range(n_cameras):
        a = 2.0 * np.pi * i / n_cameras
        h = tier_high if i % 2 == 0 else tier_low
        eye = np.array([radius * np.cos(a), h, radius * np.sin(a)])
        rot, trans = look_at(eye, np.zeros(3))
        cams.append(Camera(
            fx=focal, fy=focal, cx=width / 2.0, cy=height_px / 2.0,
            width=width, height=height_px, rotation=rot, translation=trans,
        ))
    return cams


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------

MASK_THRESHOLD = 0.5


@dataclass
class FrameRecord:
    t: int
    cameras: list[Camera]
    images: np.ndarray      # (n_cams, H, W, 3) float32 in [0, 1]
    masks: np.ndarray       # (n_cams, H, W) bool


@dataclass
class Dataset:
    root: str
    scene: AnalyticScene
    frames: list[FrameRecord]
    oracle_samples: int = 256
    _grids: dict = dc_field(default_factory=dict, repr=False)
    cache: dict = dc_field(default_factory=dict, repr=False)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def n_cameras(self) -> int:
        return len(self.frames[0].cameras)

    @property
    def resolution(self) -> tuple[int, int]:
        cam = self.frames[0].cameras[0]
        return cam.width, cam.height

    def near_far(self, cam: Camera) -> tuple[float, float]:
        return near_far_for_camera(cam, self.scene.box_min, self.scene.box_max)

    def grid(self, t: int, resolution: int = 64):
        """Visual hull for frame t, carved lazily and cached."""
        key = (t, resolution)
        if key not in self._grids:
            from .sfs import carve
            fr = self.frames[t]
            self._grids[key] = carve(
                list(fr.masks), fr.cameras, self.scene.box_min,
                self.scene.box_max, (resolution,) * 3, frame=t,
            )
        return self._grids[key]


def save_png(path: str, array: np.ndarray) -> None:
    if array.ndim == 2:
        img = Image.fromarray(array.astype(np.uint8), mode="L")
    else:
        img = Image.fromarray(array.astype(np.uint8), mode="RGB")
    img.save(path, format="PNG")


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def generate_dataset(scene: AnalyticScene, rig: list[Camera], out_dir: str,
                     n_dense: int = 256) -> str:
    """Render every (frame, camera) pair and write the dataset layout:

        <out>/scene.json
        <out>/frame_%04d/cameras.json, cam_%02d.png, mask_%02d.png
    """
    if not rig:
        raise ValueError("camera rig is empty")
    os.makedirs(out_dir, exist_ok=True)
    spec = scene.to_json()
    spec["oracle_samples"] = n_dense
    with open(os.path.join(out_dir, "scene.json"), "w") as f:
        json.dump(spec, f, indent=2, sort_keys=True)
    for t in range(scene.frame_count):
        fdir = os.path.join(out_dir, f"frame_{t:04d}")
        os.makedirs(fdir, exist_ok=True)
        with open(os.path.join(fdir, "cameras.json"), "w") as f:
            json.dump([c.to_json() for c in rig], f, indent=2, sort_keys=True)
        for ci, cam in enumerate(rig):
            img, op = oracle_render(scene, cam, t, n_dense=n_dense)
            save_png(os.path.join(fdir, f"cam_{ci:02d}.png"), quantize(img))
            mask = (op > MASK_THRESHOLD).astype(np.uint8) * 255
            save_png(os.path.join(fdir, f"mask_{ci:02d}.png"), mask)
    return out_dir


def load_dataset(root: str) -> Dataset:
    """Load a generated dataset; raises with the offending path on any
    missing or malformed file."""
    scene_path = os.path.join(root, "scene.json")
    if not os.path.isfile(scene_path):
        raise FileNotFoundError(f"dataset scene file missing: {scene_path}")
    with open(scene_path) as f:
        spec = json.load(f)
    scene = AnalyticScene.from_json(spec)
    oracle_samples = spec.get("oracle_samples", 256)
    frames = []
    for t in range(scene.frame_count):
        fdir = os.path.join(root, f"frame_{t:04d}")
        cam_path = os.path.join(fdir, "cameras.json")
        if not os.path.isfile(cam_path):
            raise FileNotFoundError(f"camera file missing: {cam_path}")
        with open(cam_path) as f:
            cameras = [Camera.from_json(d) for d in json.load(f)]
        images, masks = [], []
        for ci, cam in enumerate(cameras):
            ipath = os.path.join(fdir, f"cam_{ci:02d}.png")
            mpath = os.path.join(fdir, f"mask_{ci:02d}.png")
            for p in (ipath, mpath):
                if not os.path.isfile(p):
                    raise FileNotFoundError(f"dataset file missing: {p}")
            img = np.asarray(Image.open(ipath), dtype=np.float32) / 255.0
            msk = np.asarray(Image.open(mpath))
            if img.shape != (cam.height, cam.width, 3):
                raise ValueError(f"{ipath}: unexpected shape {img.shape}")
            if msk.shape != (cam.height, cam.width):
                raise ValueError(f"{mpath}: unexpected shape {msk.shape}")
            images.append(img)
            masks.append(msk > 127)
        frames.append(FrameRecord(
            t=t, cameras=cameras,
            images=np.stack(images), masks=np.stack(masks),
        ))
    return Dataset(root=root, scene=scene, frames=frames,
                   oracle_samples=oracle_samples)
