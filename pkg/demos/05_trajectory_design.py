"""Design bullet-time paths: presets, keyframe interpolation, and the
reference cameras each frame of the path is allowed to read."""

import tempfile

import numpy as np

from bullettime.scene import ring_rig
from bullettime.trajectory import (
    frame_camera_plan,
    interpolate,
    load_trajectory,
    preset_orbit,
    related_cameras,
    save_trajectory,
)

rig = ring_rig()

# classic frozen-time orbit: the camera sweeps, scene time stands still
freeze = preset_orbit([0, 0, 0], radius=2.6, height=0.4, n_keys=6,
                      frame_span=0.0, name="freeze")
times = {interpolate(freeze, u)[2] for u in np.linspace(0, 1, 9)}
print(f"freeze orbit: 6 keyframes, frame_time values seen: {sorted(times)}")

# sweeping orbit: camera and scene time move together
sweep = preset_orbit([0, 0, 0], radius=2.6, height=0.4, n_keys=6,
                     frame_span=7.0, name="sweep")
for u in (0.0, 0.5, 1.0):
    pos, quat, ft, _ = interpolate(sweep, u)
    print(f"  u={u:.1f}: position {np.round(pos, 2)}, frame_time {ft:.2f}")

sets = related_cameras(sweep, rig, k=4, n_stops=8)
print(f"per-stop reference sets (K=4): {sets}")

plan = frame_camera_plan(sweep, rig, k=4, n_stops=24)
print("per-frame camera plan (what refinement may read):")
for t, cams in sorted(plan.items()):
    print(f"  frame {t}: cameras {cams}")

path = tempfile.mktemp(suffix=".json", prefix="trajectory_")
save_trajectory(sweep, path)
back = load_trajectory(path)
print(f"saved and reloaded `{back.name}` with {len(back.keyframes)} "
      f"keyframes -> {path}")
