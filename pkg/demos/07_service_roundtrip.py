"""Drive the interactive service end to end without a browser: list
datasets, save a trajectory, request previews, launch a refinement job and
poll it, then pull a rendered sequence."""

import os
import tempfile
import time

from fastapi.testclient import TestClient

from bullettime.scene import generate_dataset, tiny_rig, tiny_scene
from bullettime.service import ServiceConfig, create_app
from bullettime.trajectory import preset_orbit

root = tempfile.mkdtemp(prefix="bullettime_demo_")
data_root = os.path.join(root, "data")
generate_dataset(tiny_scene(), tiny_rig(), os.path.join(data_root, "tiny"),
                 n_dense=96)

cfg = ServiceConfig(data_root=data_root,
                    trajectories_dir=os.path.join(root, "traj"),
                    snapshot_every=2, grid_resolution=32, seed=0)
app = create_app(cfg)
client = TestClient(app)

print("datasets:", client.get("/api/datasets").json())

traj = preset_orbit([0, 0, 0], 2.5, 0.3, 4, 2.0, name="demo")
client.put("/api/trajectories/demo", json=traj.to_json())
stops = client.get("/api/trajectories/demo/stops", params={"n": 5}).json()
print(f"trajectory saved; {len(stops)} stops fetched from the server")

pose = {"position": stops[2]["position"],
        "quaternion": stops[2]["quaternion"]}
r = client.post("/api/preview", json={
    "dataset": "tiny", "frame_time": stops[2]["frame_time"], "pose": pose,
})
print(f"preview: {len(r.content)} PNG bytes in "
      f"{r.headers['X-Render-Millis']} ms "
      f"({r.headers['X-Net-Evals']} network evaluations)")

r = client.post("/api/refine", json={
    "dataset": "tiny", "trajectory": "demo", "steps": 6,
    "weights": {"lambda1": 0.5, "lambda2": 0.25, "lambda3": 0.25},
})
job = r.json()["job_id"]
print(f"refinement job {job} accepted")
while True:
    state = client.get(f"/api/jobs/{job}").json()
    if state["phase"] in ("done", "failed"):
        break
    time.sleep(0.2)
print(f"job finished: phase={state['phase']}, steps={state['step']}, "
      f"last loss {state['latest'].get('loss_total', float('nan')):.4f}")

r = client.get("/api/sequence", params={"trajectory": "demo",
                                        "dataset": "tiny", "n": 3})
frames = r.content.count(b"Content-Type: image/png")
print(f"sequence stream delivered {frames} frames "
      f"({len(r.content)} bytes total)")
