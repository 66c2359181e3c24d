"""Carve a visual hull from silhouettes and query it along rays.

The hull is the coarse geometry that makes preview rendering cheap: rays
that miss it never touch the network, rays that hit it sample only a thin
window around the surface.
"""

import tempfile

import numpy as np

from bullettime import sfs
from bullettime.camera import rays_for_pixels
from bullettime.scene import near_far_for_camera, oracle_render, tiny_rig, tiny_scene

scene = tiny_scene()
rig = tiny_rig()

masks = [(oracle_render(scene, cam, 0, n_dense=128)[1] > 0.5) for cam in rig]
grid = sfs.carve(masks, rig, scene.box_min, scene.box_max, (48, 48, 48),
                 frame=0)
print(f"carved {grid.count} occupied voxels from {len(rig)} views "
      f"({grid.count / 48**3:.1%} of the stage)")

# carving is monotone: more views can only remove voxels
g3 = sfs.carve(masks[:3], rig[:3], scene.box_min, scene.box_max,
               (48, 48, 48), frame=0)
print(f"with only 3 views: {g3.count} voxels "
      f"(superset: {bool((grid.occupancy <= g3.occupancy).all())})")

cam = rig[0]
near, far = near_far_for_camera(cam, scene.box_min, scene.box_max)
spans = sfs.span_map(grid, cam, near, far)
hits = ~np.isnan(spans[:, :, 0])
depth_range = spans[hits]
print(f"camera 0 hull silhouette: {hits.sum()} px; first-hit depth "
      f"{depth_range[:, 0].min():.2f} .. {depth_range[:, 0].max():.2f}")

path = tempfile.mktemp(suffix=".bin", prefix="grid_")
sfs.save_grid(grid, path)
back = sfs.load_grid(path)
print(f"grid dump round-trips: "
      f"{bool(np.array_equal(back.occupancy, grid.occupancy))} ({path})")
