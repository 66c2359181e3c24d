import json
import threading
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from bullettime.service import ServiceConfig, create_app
from bullettime.trajectory import matrix_to_quat, preset_orbit


@pytest.fixture(scope="module")
def client(tiny_ds, tmp_path_factory):
    root = tmp_path_factory.mktemp("svc")
    data_root = root / "data"
    data_root.mkdir()
    # expose the session dataset under the service's data root
    (data_root / "tiny").symlink_to(tiny_ds.root)
    cfg = ServiceConfig(
        data_root=str(data_root),
        trajectories_dir=str(root / "traj"),
        snapshot_every=2,
        grid_resolution=32,
        seed=0,
    )
    app = create_app(cfg)
    with TestClient(app) as c:
        yield c, tiny_ds


def orbit_json(name="loop", span=2.0):
    return preset_orbit([0, 0, 0], 2.5, 0.3, 4, span, name=name).to_json()


class TestDatasets:
    def test_listing(self, client):
        c, ds = client
        out = c.get("/api/datasets").json()
        names = [d["name"] for d in out]
        assert "tiny" in names
        entry = next(d for d in out if d["name"] == "tiny")
        assert entry["frames"] == ds.n_frames
        assert entry["cameras"] == ds.n_cameras
        assert entry["resolution"] == list(ds.resolution)


class TestTrajectories:
    def test_put_get_roundtrip_canonical(self, client):
        c, _ = client
        body = orbit_json("roundtrip")
        r = c.put("/api/trajectories/roundtrip", json=body)
        assert r.status_code == 200
        got = c.get("/api/trajectories/roundtrip").json()
        # canonical JSON: a second PUT of the GET result is byte-identical
        r2 = c.put("/api/trajectories/roundtrip", json=got)
        assert r2.status_code == 200
        assert json.dumps(got, sort_keys=True) == json.dumps(
            c.get("/api/trajectories/roundtrip").json(), sort_keys=True
        )
        assert "roundtrip" in c.get("/api/trajectories").json()

    def test_delete(self, client):
        c, _ = client
        c.put("/api/trajectories/gone", json=orbit_json("gone"))
        assert c.delete("/api/trajectories/gone").status_code == 200
        assert c.get("/api/trajectories/gone").status_code == 404

    def test_unknown_404(self, client):
        c, _ = client
        assert c.get("/api/trajectories/never").status_code == 404

    def test_bad_name_400(self, client):
        c, _ = client
        assert c.get("/api/trajectories/bad*name").status_code == 400

    def test_invalid_body_400(self, client):
        c, _ = client
        r = c.put("/api/trajectories/bad", json={"keyframes": []})
        assert r.status_code == 400

    def test_stops_helper(self, client):
        c, _ = client
        c.put("/api/trajectories/stops", json=orbit_json("stops"))
        out = c.get("/api/trajectories/stops/stops", params={"n": 7}).json()
        assert len(out) == 7
        assert out[0]["u"] == 0.0 and out[-1]["u"] == 1.0
        for s in out:
            q = np.array(s["quaternion"])
            assert abs(np.linalg.norm(q) - 1.0) < 1e-6


class TestPreview:
    def _pose_of(self, cam):
        return {
            "position": [float(v) for v in cam.center],
            "quaternion": [float(v) for v in matrix_to_quat(cam.rotation.T)],
        }

    def test_preview_png_and_headers(self, client):
        c, ds = client
        cam = ds.frames[0].cameras[0]
        r = c.post("/api/preview", json={
            "dataset": "tiny", "frame_time": 0.0,
            "pose": self._pose_of(cam), "quality": "preview",
        })
        assert r.status_code == 200
        assert r.headers["content-type"] == "image/png"
        assert float(r.headers["X-Render-Millis"]) > 0
        assert int(r.headers["X-Net-Evals"]) > 0
        assert r.content[:8] == b"\x89PNG\r\n\x1a\n"

    def test_unknown_dataset_404(self, client):
        c, ds = client
        r = c.post("/api/preview", json={
            "dataset": "nope", "frame_time": 0,
            "pose": self._pose_of(ds.frames[0].cameras[0]),
        })
        assert r.status_code == 404

    def test_malformed_400(self, client):
        c, _ = client
        r = c.post("/api/preview", json={"dataset": "tiny"})
        assert r.status_code == 400

    def test_training_pose_matches_gt_after_refine(self, client):
        # weak sanity: the preview of a training camera correlates with its
        # ground-truth image far better than with an unrelated frame
        c, ds = client
        from PIL import Image
        import io
        cam = ds.frames[0].cameras[2]
        r = c.post("/api/preview", json={
            "dataset": "tiny", "frame_time": 0.0, "pose": self._pose_of(cam),
        })
        img = np.asarray(Image.open(io.BytesIO(r.content)),
                         dtype=np.float32) / 255.0
        assert img.shape == ds.frames[0].images[2].shape


class TestRefineJob:
    def test_lifecycle_and_mutual_exclusion(self, client):
        c, _ = client
        c.put("/api/trajectories/job", json=orbit_json("job"))
        body = {"dataset": "tiny", "trajectory": "job", "steps": 4,
                "weights": {"lambda1": 0.5, "lambda2": 0.0, "lambda3": 0.25}}
        r1 = c.post("/api/refine", json=body)
        r2 = c.post("/api/refine", json=body)
        codes = sorted([r1.status_code, r2.status_code])
        assert codes == [202, 409]
        job_id = (r1 if r1.status_code == 202 else r2).json()["job_id"]

        phases = []
        order = {"queued": 0, "running": 1, "done": 2, "failed": 2}
        for _ in range(400):
            state = c.get(f"/api/jobs/{job_id}").json()
            phases.append(state["phase"])
            if state["phase"] in ("done", "failed"):
                break
            time.sleep(0.05)
        assert state["phase"] == "done", state
        ranks = [order[p] for p in phases]
        assert all(a <= b for a, b in zip(ranks, ranks[1:])), phases
        assert state["step"] == 4
        assert state["latest"]["loss_total"] >= 0

    def test_refine_unknown_trajectory_404(self, client):
        c, _ = client
        r = c.post("/api/refine", json={"dataset": "tiny",
                                        "trajectory": "missing", "steps": 1})
        assert r.status_code == 404

    def test_job_404(self, client):
        c, _ = client
        assert c.get("/api/jobs/doesnotexist").status_code == 404

    def test_preview_works_during_refine(self, client):
        c, ds = client
        c.put("/api/trajectories/busy", json=orbit_json("busy"))
        body = {"dataset": "tiny", "trajectory": "busy", "steps": 6}
        r = c.post("/api/refine", json=body)
        if r.status_code == 409:  # previous job may still be finishing
            time.sleep(1.0)
            r = c.post("/api/refine", json=body)
        assert r.status_code == 202
        cam = ds.frames[0].cameras[1]
        pose = {"position": [float(v) for v in cam.center],
                "quaternion": [float(v)
                               for v in matrix_to_quat(cam.rotation.T)]}
        pr = c.post("/api/preview", json={"dataset": "tiny", "frame_time": 1,
                                          "pose": pose})
        assert pr.status_code == 200
        job_id = r.json()["job_id"]
        for _ in range(400):
            state = c.get(f"/api/jobs/{job_id}").json()
            if state["phase"] in ("done", "failed"):
                break
            time.sleep(0.05)
        assert state["phase"] == "done"


class TestSequence:
    def test_multipart_stream(self, client):
        c, _ = client
        c.put("/api/trajectories/seq", json=orbit_json("seq"))
        r = c.get("/api/sequence", params={
            "trajectory": "seq", "dataset": "tiny", "n": 3,
        })
        assert r.status_code == 200
        assert "multipart/x-mixed-replace" in r.headers["content-type"]
        assert r.content.count(b"Content-Type: image/png") == 3

    def test_unknown_trajectory(self, client):
        c, _ = client
        r = c.get("/api/sequence", params={
            "trajectory": "nope", "dataset": "tiny", "n": 2,
        })
        assert r.status_code == 404
