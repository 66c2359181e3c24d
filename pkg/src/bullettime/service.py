"""Interactive backend: dataset browsing, live preview rendering,
trajectory CRUD, and refinement-job control.

One refinement job runs at a time on a worker thread; it publishes an
immutable parameter snapshot every `snapshot_every` steps, and preview
requests always render from the latest snapshot, so they never wait on the
optimizer. Trajectory writes go through a temp file + atomic rename.
"""

from __future__ import annotations

import io
import json
import os
import re
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.responses import StreamingResponse

from .camera import select_reference_cameras
from .config import ModelConfig, RenderConfig, TrainConfig, from_json, to_json
from .optim import ParamStore, load_checkpoint
from .renderer import init_model, render_image
from .scene import Dataset, load_dataset, quantize
from .tensor import no_grad
from .trajectory import Trajectory, pose_to_camera, quat_normalize
from .training import (
    DatasetContext,
    LossWeights,
    make_refs,
    refine_on_trajectory,
    trajectory_stops,
)

NAME_RE = re.compile(r"^[A-Za-z0-9._-]{1,64}$")


@dataclass
class ServiceConfig:
    data_root: str
    trajectories_dir: str
    checkpoint: str | None = None
    host: str = "127.0.0.1"
    port: int = 8089
    snapshot_every: int = 50
    k_views: int = 4
    grid_resolution: int = 64
    preview_samples: int = 10
    refined_samples: tuple = (64, 64)
    seed: int = 42


@dataclass
class JobState:
    id: str
    phase: str = "queued"            # queued -> running -> done | failed
    step: int = 0
    total_steps: int = 0
    latest: dict = field(default_factory=dict)
    checkpoint: str | None = None
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "id": self.id, "phase": self.phase, "step": self.step,
            "total_steps": self.total_steps, "latest": self.latest,
            "checkpoint": self.checkpoint, "error": self.error,
        }


class ServiceState:
    def __init__(self, cfg: ServiceConfig):
        self.cfg = cfg
        self.mcfg = ModelConfig()
        if cfg.checkpoint:
            store = load_checkpoint(cfg.checkpoint)
            sidecar = cfg.checkpoint + ".json"
            if os.path.isfile(sidecar):
                with open(sidecar) as f:
                    self.mcfg = from_json(ModelConfig, json.load(f))
        else:
            store = init_model(cfg.seed, self.mcfg)
        self._snapshot = store
        self._snapshot_lock = threading.Lock()
        self._datasets: dict[str, Dataset] = {}
        self._contexts: dict[str, DatasetContext] = {}
        self.job: JobState | None = None
        self._job_lock = threading.Lock()
        self._worker: threading.Thread | None = None
        os.makedirs(cfg.trajectories_dir, exist_ok=True)

    # -- snapshots ---------------------------------------------------------

    def publish(self, store: ParamStore) -> None:
        copy = store.copy()
        with self._snapshot_lock:
            self._snapshot = copy

    def snapshot(self) -> ParamStore:
        with self._snapshot_lock:
            return self._snapshot

    # -- datasets ----------------------------------------------------------

    def dataset_names(self) -> list[str]:
        names = []
        if os.path.isdir(self.cfg.data_root):
            for entry in sorted(os.listdir(self.cfg.data_root)):
                if os.path.isfile(os.path.join(self.cfg.data_root, entry,
                                               "scene.json")):
                    names.append(entry)
        return names

    def dataset(self, name: str) -> Dataset:
        if name not in self._datasets:
            path = os.path.join(self.cfg.data_root, name)
            if not os.path.isfile(os.path.join(path, "scene.json")):
                raise KeyError(name)
            self._datasets[name] = load_dataset(path)
            self._contexts[name] = DatasetContext(
                self._datasets[name], self.cfg.grid_resolution
            )
        return self._datasets[name]

    def context(self, name: str) -> DatasetContext:
        self.dataset(name)
        return self._contexts[name]

    # -- trajectories --------------------------------------------------------

    def traj_path(self, name: str) -> str:
        if not NAME_RE.match(name):
            raise ValueError(f"invalid trajectory name {name!r}")
        return os.path.join(self.cfg.trajectories_dir, name + ".json")


def _render_config(state: ServiceState, quality: str) -> RenderConfig:
    if quality == "refined":
        coarse, fine = state.cfg.refined_samples
        return RenderConfig(coarse_samples=coarse, fine_samples=fine,
                            use_semantic=True)
    return RenderConfig(coarse_samples=state.cfg.preview_samples)


def _render_pose(state: ServiceState, store, dataset_name: str, cam, t: int,
                 rcfg: RenderConfig, seed=0):
    ds = state.dataset(dataset_name)
    ctx = state.context(dataset_name)
    rig = ds.frames[t].cameras
    sel = select_reference_cameras(cam, rig, state.cfg.k_views)
    refs = make_refs(store, ctx, t, sel, rcfg, state.mcfg)
    near, far = ctx.near_far(cam)
    with no_grad():
        out = render_image(
            store.params, refs, cam,
            ctx.grid(t) if rcfg.use_hull else None,
            rcfg, state.mcfg, near, far,
            rng=np.random.default_rng(seed),
        )
    return out


def _png_bytes(img01: np.ndarray) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(quantize(img01), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def create_app(cfg: ServiceConfig) -> FastAPI:
    state = ServiceState(cfg)
    app = FastAPI(title="bullettime service")
    app.state.service = state

    @app.get("/api/datasets")
    def list_datasets():
        out = []
        for name in state.dataset_names():
            ds = state.dataset(name)
            w, h = ds.resolution
            out.append({"name": name, "frames": ds.n_frames,
                        "cameras": ds.n_cameras, "resolution": [w, h]})
        return out

    @app.post("/api/preview")
    async def preview(request: Request):
        try:
            body = await request.json()
        except Exception:
            raise HTTPException(400, "body is not valid JSON")
        try:
            name = body["dataset"]
            frame_time = float(body.get("frame_time", 0.0))
            pose = body["pose"]
            quality = body.get("quality", "preview")
            position = [float(v) for v in pose["position"]]
            quaternion = quat_normalize([float(v) for v in pose["quaternion"]])
            fov = pose.get("fov")
        except (KeyError, TypeError, ValueError) as e:
            raise HTTPException(400, f"malformed preview request: {e}")
        if quality not in ("preview", "refined"):
            raise HTTPException(400, f"unknown quality {quality!r}")
        try:
            ds = state.dataset(name)
        except KeyError:
            raise HTTPException(404, f"unknown dataset {name!r}")
        t = int(np.clip(np.floor(frame_time + 0.5), 0, ds.n_frames - 1))
        template = ds.frames[0].cameras[0]
        try:
            cam = pose_to_camera(position, quaternion, template, fov)
        except ValueError as e:
            raise HTTPException(400, str(e))
        rcfg = _render_config(state, quality)
        t0 = time.perf_counter()
        out = _render_pose(state, state.snapshot(), name, cam, t, rcfg)
        ms = (time.perf_counter() - t0) * 1000.0
        return Response(
            content=_png_bytes(out.image_np), media_type="image/png",
            headers={
                "X-Render-Millis": f"{ms:.1f}",
                "X-Net-Evals": str(out.stats["net_evals"]),
            },
        )

    # -- trajectory CRUD ---------------------------------------------------

    @app.get("/api/trajectories")
    def list_trajectories():
        names = []
        for f in sorted(os.listdir(cfg.trajectories_dir)):
            if f.endswith(".json"):
                names.append(f[:-5])
        return names

    @app.get("/api/trajectories/{name}")
    def get_trajectory(name: str):
        try:
            path = state.traj_path(name)
        except ValueError as e:
            raise HTTPException(400, str(e))
        if not os.path.isfile(path):
            raise HTTPException(404, f"unknown trajectory {name!r}")
        with open(path) as f:
            return json.load(f)

    @app.put("/api/trajectories/{name}")
    async def put_trajectory(name: str, request: Request):
        try:
            path = state.traj_path(name)
        except ValueError as e:
            raise HTTPException(400, str(e))
        try:
            body = await request.json()
            traj = Trajectory.from_json(body)
        except Exception as e:
            raise HTTPException(400, f"invalid trajectory: {e}")
        traj.name = name
        tmp = path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(traj.to_json(), f, indent=2, sort_keys=True)
        os.replace(tmp, path)
        return traj.to_json()

    @app.delete("/api/trajectories/{name}")
    def delete_trajectory(name: str):
        try:
            path = state.traj_path(name)
        except ValueError as e:
            raise HTTPException(400, str(e))
        if not os.path.isfile(path):
            raise HTTPException(404, f"unknown trajectory {name!r}")
        os.remove(path)
        return {"deleted": name}

    @app.get("/api/trajectories/{name}/stops")
    def trajectory_stop_list(name: str, n: int = 16, dataset: str = ""):
        try:
            path = state.traj_path(name)
        except ValueError as e:
            raise HTTPException(400, str(e))
        if not os.path.isfile(path):
            raise HTTPException(404, f"unknown trajectory {name!r}")
        with open(path) as f:
            traj = Trajectory.from_json(json.load(f))
        out = []
        for u in np.linspace(0.0, 1.0, max(int(n), 2)):
            from .trajectory import interpolate
            pos, quat, ft, fov = interpolate(traj, float(u))
            out.append({"u": float(u), "position": list(map(float, pos)),
                        "quaternion": list(map(float, quat)),
                        "frame_time": float(ft), "fov": fov})
        return out

    # -- refinement job ------------------------------------------------------

    @app.post("/api/refine", status_code=202)
    async def refine(request: Request):
        try:
            body = await request.json()
            ds_name = body["dataset"]
            traj_name = body["trajectory"]
            steps = int(body.get("steps", 200))
            wdict = body.get("weights", {})
            weights = LossWeights(
                lambda1=float(wdict.get("lambda1", 0.5)),
                lambda2=float(wdict.get("lambda2", 0.25)),
                lambda3=float(wdict.get("lambda3", 0.25)),
            )
        except HTTPException:
            raise
        except Exception as e:
            raise HTTPException(400, f"malformed refine request: {e}")
        try:
            ds = state.dataset(ds_name)
        except KeyError:
            raise HTTPException(404, f"unknown dataset {ds_name!r}")
        try:
            tpath = state.traj_path(traj_name)
        except ValueError as e:
            raise HTTPException(400, str(e))
        if not os.path.isfile(tpath):
            raise HTTPException(404, f"unknown trajectory {traj_name!r}")
        with open(tpath) as f:
            traj = Trajectory.from_json(json.load(f))

        with state._job_lock:
            if state.job is not None and state.job.phase in ("queued",
                                                             "running"):
                raise HTTPException(409, "a refinement job is already running")
            job = JobState(id=uuid.uuid4().hex[:12], total_steps=steps)
            state.job = job

        def work():
            job.phase = "running"
            try:
                store = state.snapshot().copy()
                rcfg = _render_config(state, "preview")
                rcfg.use_semantic = True
                tcfg = TrainConfig(seed=cfg.seed)

                def on_step(step, live_store, rec):
                    job.step = step + 1
                    job.latest = rec
                    if (step + 1) % cfg.snapshot_every == 0:
                        state.publish(live_store)

                refine_on_trajectory(
                    store, traj, ds, weights, steps, tcfg, rcfg, state.mcfg,
                    k_views=cfg.k_views,
                    grid_resolution=cfg.grid_resolution, on_step=on_step,
                )
                state.publish(store)
                ck = os.path.join(cfg.trajectories_dir,
                                  f"refined_{job.id}.ckpt")
                from .optim import save_checkpoint
                save_checkpoint(store, ck)
                job.checkpoint = ck
                job.phase = "done"
            except Exception as e:  # surface the failure to pollers
                job.error = str(e)
                job.phase = "failed"

        state._worker = threading.Thread(target=work, daemon=True)
        state._worker.start()
        return {"job_id": job.id}

    @app.get("/api/jobs/{job_id}")
    def job_state(job_id: str):
        job = state.job
        if job is None or job.id != job_id:
            raise HTTPException(404, f"unknown job {job_id!r}")
        return job.to_json()

    # -- sequence streaming ---------------------------------------------------

    @app.get("/api/sequence")
    def sequence(trajectory: str, dataset: str, n: int = 8,
                 quality: str = "preview"):
        try:
            tpath = state.traj_path(trajectory)
        except ValueError as e:
            raise HTTPException(400, str(e))
        if not os.path.isfile(tpath):
            raise HTTPException(404, f"unknown trajectory {trajectory!r}")
        try:
            ds = state.dataset(dataset)
        except KeyError:
            raise HTTPException(404, f"unknown dataset {dataset!r}")
        with open(tpath) as f:
            traj = Trajectory.from_json(json.load(f))
        rcfg = _render_config(state, quality)
        store = state.snapshot()
        boundary = "btframe"

        def gen():
            for i, (u, cam, t) in enumerate(
                trajectory_stops(traj, ds, max(int(n), 1))
            ):
                out = _render_pose(state, store, dataset, cam, t, rcfg,
                                   seed=i)
                payload = _png_bytes(out.image_np)
                yield (f"--{boundary}\r\nContent-Type: image/png\r\n"
                       f"Content-Length: {len(payload)}\r\n\r\n"
                       ).encode() + payload + b"\r\n"
            yield f"--{boundary}--\r\n".encode()

        return StreamingResponse(
            gen(), media_type=f"multipart/x-mixed-replace; boundary={boundary}"
        )

    frontend = os.path.join(os.path.dirname(cfg.trajectories_dir) or ".",
                            "frontend")
    dist = os.environ.get("BULLETTIME_FRONTEND", frontend)
    if os.path.isdir(os.path.join(dist, "dist")):
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=os.path.join(dist, "dist"),
                                   html=True), name="ui")
    return app
