"""Training: photometric / spatial / temporal losses, geometry-derived
flow, the pretraining loop, and trajectory-aware refinement.

Loss conventions: every term is 1/2 * sum of squared error over masked
pixels, normalized by the masked-pixel count, so the lambda weights stay
resolution independent. Temporal flow comes from block-matching the
occupancy grids of adjacent frames (a grid-based stand-in for model
tracking); it is treated as a constant input, gradients never flow
through it.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import sfs
from .camera import Camera, project_points, rays_for_pixels, select_reference_cameras
from .config import ModelConfig, RenderConfig, TrainConfig
from .optim import ParamStore, adam_step, save_checkpoint
from .renderer import (
    ReferenceSet,
    build_reference_set,
    make_ref_entry,
    render_image,
    render_rays,
)
from .scene import Dataset, oracle_render
from .tensor import Tensor, bilinear_sample, no_grad
from .trajectory import Trajectory, camera_at, frame_camera_plan
from .metrics import psnr


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.25
    lambda3: float = 0.25

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_rgb(rendered, ground_truth, mask=None) -> Tensor:
    """1/2 * masked squared error, normalized by masked pixel count."""
    rendered = Tensor.as_tensor(rendered)
    gt = np.asarray(ground_truth, dtype=np.float32)
    if rendered.data.shape != gt.shape:
        raise ValueError(
            f"render {rendered.data.shape} vs ground truth {gt.shape}"
        )
    npx = int(np.prod(gt.shape[:-1]))
    flat = rendered.reshape(npx, gt.shape[-1])
    gt_flat = gt.reshape(npx, gt.shape[-1])
    if mask is None:
        maskf = np.ones((npx, 1), np.float32)
        count = npx
    else:
        m = np.asarray(mask, dtype=bool).reshape(npx)
        count = int(m.sum())
        if count == 0:
            return Tensor(0.0)
        maskf = m.astype(np.float32)[:, None]
    err = (flat - Tensor(gt_flat)) * Tensor(maskf)
    return (err * err).sum() * (0.5 / count)


# ---------------------------------------------------------------------------
# geometry flow + warping
# ---------------------------------------------------------------------------

@dataclass
class Flow:
    disp: np.ndarray    # (H, W, 2) pixel displacement, (du, dv)
    valid: np.ndarray   # (H, W) bool


def correspond_grids(grid_from: sfs.OccupancyGrid, grid_to: sfs.OccupancyGrid,
                     rho: int = 6, window: int = 2) -> dict:
    """Integer-voxel displacement for every surface voxel of `grid_from`,
    found by matching local occupancy blocks in `grid_to` within radius rho.

    Static grids map to zero displacement exactly (ties prefer the smaller
    offset); a rigid integer-voxel shift is recovered exactly. Returns
    {"disp": (nx,ny,nz,3) int16, "valid": (nx,ny,nz) bool}.
    """
    if grid_from.resolution != grid_to.resolution:
        raise ValueError("grids must share resolution")
    res = np.array(grid_from.resolution)
    occ_a = grid_from.occupancy
    occ_b = grid_to.occupancy

    # surface voxels: occupied with at least one empty 6-neighbor
    core = occ_a.copy()
    for ax in range(3):
        for sh in (1, -1):
            core &= np.roll(occ_a, sh, axis=ax)
    surf = np.argwhere(occ_a & ~core)
    disp = np.zeros((*grid_from.resolution, 3), dtype=np.int16)
    valid = np.zeros(grid_from.resolution, dtype=bool)
    if len(surf) == 0:
        return {"disp": disp, "valid": valid}

    pad = rho + window
    pa = np.pad(occ_a, pad).astype(np.int8)
    pb = np.pad(occ_b, pad).astype(np.int8)
    w = np.arange(-window, window + 1)
    woff = np.stack(np.meshgrid(w, w, w, indexing="ij"), -1).reshape(-1, 3)
    base = surf + pad
    nxp, nyp, nzp = pa.shape
    lin_a = ((base[:, None, 0] + woff[None, :, 0]) * nyp * nzp
             + (base[:, None, 1] + woff[None, :, 1]) * nzp
             + (base[:, None, 2] + woff[None, :, 2]))
    block_a = pa.reshape(-1)[lin_a]

    offs = np.arange(-rho, rho + 1)
    cands = np.stack(np.meshgrid(offs, offs, offs, indexing="ij"), -1).reshape(-1, 3)
    norms = np.linalg.norm(cands, axis=1)
    keep = norms <= rho
    cands = cands[keep][np.argsort(norms[keep], kind="stable")]

    flat_b = pb.reshape(-1)
    best_cost = np.full(len(surf), np.iinfo(np.int32).max, dtype=np.int32)
    best_d = np.zeros((len(surf), 3), dtype=np.int16)
    for d in cands:
        lin_b = lin_a + (d[0] * nyp * nzp + d[1] * nzp + d[2])
        cost = (block_a != flat_b.reshape(-1)[lin_b]).sum(axis=1, dtype=np.int32)
        better = cost < best_cost
        best_cost[better] = cost[better]
        best_d[better] = d
    disp[surf[:, 0], surf[:, 1], surf[:, 2]] = best_d
    valid[surf[:, 0], surf[:, 1], surf[:, 2]] = True
    return {"disp": disp, "valid": valid}


def flow_from_geometry(grid_from: sfs.OccupancyGrid, grid_to: sfs.OccupancyGrid,
                       cam: Camera, near: float, far: float, rho: int = 6,
                       correspondence: dict | None = None,
                       dmap: np.ndarray | None = None) -> Flow:
    """Per-pixel 2-D flow mapping `grid_from`-frame pixels to their
    `grid_to`-frame positions, projected from voxel correspondences."""
    if correspondence is None:
        correspondence = correspond_grids(grid_from, grid_to, rho)
    if dmap is None:
        dmap = sfs.depth_map(grid_from, cam, near, far)
    h, w = dmap.shape
    disp = np.zeros((h, w, 2), dtype=np.float32)
    valid = np.zeros((h, w), dtype=bool)
    hit = ~np.isnan(dmap)
    if not hit.any():
        return Flow(disp, valid)
    ys, xs = np.nonzero(hit)
    origins, dirs = rays_for_pixels(cam, xs + 0.5, ys + 0.5)
    p = origins + dmap[ys, xs][:, None] * dirs
    # nudge half a voxel along the ray so the point sits inside its voxel
    p_in = p + 0.5 * grid_from.voxel_size * dirs
    idx = np.floor((p_in - grid_from.origin) / grid_from.voxel_size).astype(int)
    idx = np.clip(idx, 0, np.array(grid_from.resolution) - 1)
    ok = correspondence["valid"][idx[:, 0], idx[:, 1], idx[:, 2]]
    d = correspondence["disp"][idx[:, 0], idx[:, 1], idx[:, 2]]
    p2 = p + d * grid_from.voxel_size
    u2, v2, z2 = project_points(cam, p2)
    ok &= z2 > 0
    ok &= (u2 >= 0) & (u2 < w) & (v2 >= 0) & (v2 < h)
    disp[ys, xs, 0] = (u2 - (xs + 0.5)).astype(np.float32)
    disp[ys, xs, 1] = (v2 - (ys + 0.5)).astype(np.float32)
    valid[ys, xs] = ok
    disp[~valid] = 0.0
    return Flow(disp, valid)


def warp(image, flow: Flow):
    """out(x) = bilinear sample of `image` at x + flow(x); zero where the
    flow is invalid. Differentiable in the image, constant in the flow."""
    img = Tensor.as_tensor(image)
    h, w = flow.valid.shape
    if img.data.shape[:2] != (h, w):
        raise ValueError(f"image {img.data.shape} vs flow {flow.valid.shape}")
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    sx = xs + flow.disp[:, :, 0] - 0.5
    sy = ys + flow.disp[:, :, 1] - 0.5
    chw = img.transpose(2, 0, 1)
    sampled = bilinear_sample(chw, sx.ravel(), sy.ravel())
    maskf = flow.valid.astype(np.float32).reshape(-1, 1)
    return (sampled * Tensor(maskf)).reshape(h, w, img.data.shape[2])


def loss_temporal(render_t, render_tm1, flow: Flow, mask) -> Tensor:
    """1/2 * masked error between the older render and the newer one warped
    back to it. `flow` maps older-frame pixels to newer-frame coordinates;
    gradient reaches both renders, the flow stays constant."""
    warped = warp(render_t, flow)
    m = np.asarray(mask, dtype=bool) & flow.valid
    older = Tensor.as_tensor(render_tm1)
    if not m.any():
        return Tensor(0.0)
    count = int(m.sum())
    maskf = m.astype(np.float32)[:, :, None]
    err = (older - warped) * Tensor(maskf)
    return (err * err).sum() * (0.5 / count)


# ---------------------------------------------------------------------------
# dataset context: cached hulls, depth maps, correspondences, access log
# ---------------------------------------------------------------------------

def scale_camera(cam: Camera, factor: int) -> Camera:
    """Integer-downscaled intrinsics (factor 2 -> half resolution)."""
    if factor == 1:
        return cam
    return Camera(
        fx=cam.fx / factor, fy=cam.fy / factor,
        cx=cam.cx / factor, cy=cam.cy / factor,
        width=cam.width // factor, height=cam.height // factor,
        rotation=cam.rotation.copy(), translation=cam.translation.copy(),
    )


class DatasetContext:
    """Caches per-frame hulls, rig depth maps and inter-frame voxel
    correspondences; logs which reference images training actually reads."""

    def __init__(self, dataset: Dataset, grid_resolution: int = 64,
                 flow_rho: int = 6):
        self.dataset = dataset
        self.grid_resolution = grid_resolution
        self.flow_rho = flow_rho
        # depth maps / correspondences live on the dataset so they survive
        # across trainer and evaluator instances within a process
        self._dmaps = dataset.cache.setdefault(("dmaps", grid_resolution), {})
        self._corr = dataset.cache.setdefault(
            ("corr", grid_resolution, flow_rho), {}
        )
        self.access_log: dict[int, set] = {}
        # frozen-branch feature maps for dataset images, valid for the
        # lifetime of this context (aux params never change mid-run)
        self._aux_maps: dict = {}

    def grid(self, t: int) -> sfs.OccupancyGrid:
        return self.dataset.grid(t, self.grid_resolution)

    def near_far(self, cam: Camera):
        return self.dataset.near_far(cam)

    def rig_span_map(self, t: int, cam_idx: int) -> np.ndarray:
        key = (t, cam_idx)
        if key not in self._dmaps:
            cam = self.dataset.frames[t].cameras[cam_idx]
            near, far = self.near_far(cam)
            self._dmaps[key] = sfs.span_map(self.grid(t), cam, near, far)
        return self._dmaps[key]

    def correspondence(self, t_from: int, t_to: int) -> dict:
        key = (t_from, t_to)
        if key not in self._corr:
            self._corr[key] = correspond_grids(
                self.grid(t_from), self.grid(t_to), self.flow_rho
            )
        return self._corr[key]

    def read_image(self, t: int, cam_idx: int) -> np.ndarray:
        self.access_log.setdefault(t, set()).add(cam_idx)
        return self.dataset.frames[t].images[cam_idx]

    def camera(self, t: int, cam_idx: int) -> Camera:
        return self.dataset.frames[t].cameras[cam_idx]

    def hull_mask(self, t: int, cam_idx: int) -> np.ndarray:
        return ~np.isnan(self.rig_span_map(t, cam_idx)[:, :, 0])

    def aux_features(self, store, t: int, cam_idx: int, mcfg: ModelConfig):
        key = (t, cam_idx)
        if key not in self._aux_maps:
            from .renderer import extract_features
            with no_grad():
                self._aux_maps[key] = extract_features(
                    self.dataset.frames[t].images[cam_idx], store.params,
                    mcfg, "aux",
                )
        return self._aux_maps[key]

    def ghost_zone(self, t: int, cam_idx: int, width: int = 6) -> np.ndarray:
        """Pixels just outside the hull silhouette: where image-based
        ghosting lives, and where dense training batches are most useful."""
        key = ("ghost", t, cam_idx, width)
        cache = self.dataset.cache.setdefault(key, None)
        if cache is None:
            from scipy import ndimage
            hull = self.hull_mask(t, cam_idx)
            zone = ndimage.binary_dilation(hull, iterations=width) & ~hull
            self.dataset.cache[key] = zone
            cache = zone
        return cache


# ---------------------------------------------------------------------------
# ray-batch helpers
# ---------------------------------------------------------------------------

def _pick_pixels(rng, candidates: np.ndarray, count: int) -> np.ndarray:
    if len(candidates) == 0:
        return candidates
    replace = len(candidates) < count
    return rng.choice(candidates, size=count, replace=replace)


def _batch_loss(stages, gt_rows) -> Tensor:
    """Photometric loss per evaluated stage (coarse and, if on, fine)."""
    total = None
    for color, _ in stages:
        term = loss_rgb(color, gt_rows)
        total = term if total is None else total + term
    return total


def _render_pixel_batch(store, refs, cam, grid, pixels, spans, rcfg, mcfg,
                        near, far, rng, field_fn=None):
    ys, xs = np.divmod(pixels, cam.width)
    origins, dirs = rays_for_pixels(cam, xs + 0.5, ys + 0.5)
    voxel = grid.voxel_size if grid is not None else 0.0
    return render_rays(
        store.params, refs, origins, dirs, near, far, spans,
        rcfg, mcfg, rcfg.range_factor * voxel, voxel, rng=rng,
        field_fn=field_fn,
    )


def rgb_batch_loss(store, ctx: DatasetContext, refs, t, cam_idx, rcfg, mcfg,
                   rng, n_rays, dense_unmasked=False, dense_samples=16):
    """Photometric ray-batch loss against reference camera `cam_idx`."""
    cam = ctx.camera(t, cam_idx)
    near, far = ctx.near_far(cam)
    gt = ctx.read_image(t, cam_idx)
    grid = ctx.grid(t)
    if dense_unmasked:
        # half uniform over the image, half in the ghost zone around the
        # silhouette where image-based ghosting concentrates
        uniform = rng.integers(0, cam.width * cam.height, size=n_rays // 2)
        zone = np.flatnonzero(ctx.ghost_zone(t, cam_idx).reshape(-1))
        if len(zone):
            biased = _pick_pixels(rng, zone, n_rays - len(uniform))
            pixels = np.concatenate([uniform, biased])
        else:
            pixels = rng.integers(0, cam.width * cam.height, size=n_rays)
        cfg = RenderConfig(**{**rcfg.__dict__, "use_hull": False,
                              "dense_samples": dense_samples})
        rr = _render_pixel_batch(store, refs, cam, None, pixels, None,
                                 cfg, mcfg, near, far, rng)
    else:
        smap = ctx.rig_span_map(t, cam_idx).reshape(-1, 2)
        cand = np.flatnonzero(~np.isnan(smap[:, 0]))
        if len(cand) == 0:
            return Tensor(0.0), 0
        pixels = _pick_pixels(rng, cand, n_rays)
        rr = _render_pixel_batch(store, refs, cam, grid, pixels,
                                 smap[pixels].astype(np.float32),
                                 rcfg, mcfg, near, far, rng)
    ys, xs = np.divmod(pixels, cam.width)
    return _batch_loss(rr.stages, gt[ys, xs]), rr.net_evals


# ---------------------------------------------------------------------------
# spatial consistency loss
# ---------------------------------------------------------------------------

def loss_spatial(store, ctx: DatasetContext, refs: ReferenceSet,
                 target_cam: Camera, t: int, ref_indices: list[int],
                 rcfg: RenderConfig, mcfg: ModelConfig, rng,
                 rays_per_view: int | None = None, downscale: int = 1,
                 field_fn=None):
    """Render the target view, splice it into the reference set, then
    re-render each reference view with itself held out and score against
    its ground truth (masked by that view's hull silhouette).

    Gradients flow through the target render, its feature extraction, and
    the re-renders. Averages over the K held-out choices.
    """
    if len(ref_indices) < 2:
        raise ValueError("spatial loss needs at least 2 reference views")
    grid = ctx.grid(t)
    cam_lo = scale_camera(target_cam, downscale)
    near, far = ctx.near_far(cam_lo)
    target_render = render_image(
        store.params, refs, cam_lo, grid if rcfg.use_hull else None,
        rcfg, mcfg, near, far, rng=rng, field_fn=field_fn,
    )
    evals = target_render.stats["net_evals"]
    synth_entry = make_ref_entry(
        cam_lo, target_render.image, store.params, mcfg, rcfg.use_semantic
    )

    total = None
    for i, cam_idx in enumerate(ref_indices):
        held_cam = ctx.camera(t, cam_idx)
        gt = ctx.read_image(t, cam_idx)
        entries = [e for j, e in enumerate(refs.entries) if j != i]
        entries.append(synth_entry)
        spliced = ReferenceSet(entries=entries, frame=t)
        n2, f2 = ctx.near_far(held_cam)
        if rcfg.use_hull:
            smap = ctx.rig_span_map(t, cam_idx).reshape(-1, 2)
            cand = np.flatnonzero(~np.isnan(smap[:, 0]))
        else:
            mask = ctx.dataset.frames[t].masks[cam_idx].reshape(-1)
            cand = np.flatnonzero(mask)
        if len(cand) == 0:
            continue
        if rays_per_view is not None:
            pixels = _pick_pixels(rng, cand, rays_per_view)
        else:
            pixels = cand
        spans = (smap[pixels].astype(np.float32) if rcfg.use_hull else None)
        rr = _render_pixel_batch(
            store, spliced, held_cam, grid if rcfg.use_hull else None,
            pixels, spans, rcfg, mcfg, n2, f2, rng, field_fn=field_fn,
        )
        ys, xs = np.divmod(pixels, held_cam.width)
        term = _batch_loss(rr.stages, gt[ys, xs])
        evals += rr.net_evals
        total = term if total is None else total + term
    if total is None:
        return Tensor(0.0), target_render, synth_entry, evals
    return total * (1.0 / len(ref_indices)), target_render, synth_entry, evals


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def _lr_map(tcfg: TrainConfig) -> dict:
    return {"extractor.": tcfg.lr_extractor, "interp.": tcfg.lr_interp}


def _active_paths(store: ParamStore, rcfg: RenderConfig) -> list:
    """Trainable parameters the configured render path actually exercises
    (the fine interpolation net only participates in hierarchical runs)."""
    paths = store.trainable()
    if rcfg.fine_samples == 0:
        paths = [k for k in paths if not k.startswith("interp.fine.")]
    return paths


def make_refs(store, ctx: DatasetContext, t: int, cam_indices: list[int],
              rcfg: RenderConfig, mcfg: ModelConfig) -> ReferenceSet:
    cams = [ctx.camera(t, i) for i in cam_indices]
    imgs = [ctx.read_image(t, i) for i in cam_indices]
    aux_maps = None
    if rcfg.use_semantic:
        aux_maps = [ctx.aux_features(store, t, i, mcfg) for i in cam_indices]
    return build_reference_set(cams, imgs, t, store.params, mcfg,
                               use_semantic=rcfg.use_semantic,
                               aux_maps=aux_maps)


def pretrain(store: ParamStore, datasets: list[Dataset], steps: int,
             tcfg: TrainConfig, rcfg: RenderConfig, mcfg: ModelConfig,
             k_views: int = 4, holdout=(), on_step=None,
             grid_resolution: int = 64, start_step: int = 0,
             contexts: list | None = None):
    """End-to-end photometric pretraining over random (dataset, frame,
    target camera, ray batch) draws.

    Most batches sample around the hull depth and are masked to the hull
    silhouette; a fraction are sampled densely over [near, far] without a
    mask so empty space learns zero density (the synthetic background is
    exact ground truth, unlike a capture stage). The auxiliary feature
    branch stays frozen and switches on for the trailing warmup fraction so
    refinement starts from adapted weights.
    """
    if not datasets:
        raise ValueError("pretrain needs at least one dataset")
    store.freeze("extractor.aux")
    if contexts is None:
        contexts = [DatasetContext(d, grid_resolution) for d in datasets]
    lrs = _lr_map(tcfg)
    log = []
    t0 = time.perf_counter()
    total = start_step + steps
    semantic_from = int(round(total * (1.0 - tcfg.semantic_warmup_fraction)))
    total_evals = 0
    for step in range(start_step, total):
        rng = np.random.default_rng([tcfg.seed, step])
        ctx = contexts[int(rng.integers(len(contexts)))]
        ds = ctx.dataset
        train_cams = [i for i in range(ds.n_cameras) if i not in holdout]
        t = int(rng.integers(ds.n_frames))
        target_idx = int(train_cams[rng.integers(len(train_cams))])
        pool = [ctx.camera(t, i) for i in train_cams]
        target_cam = ctx.camera(t, target_idx)
        local = select_reference_cameras(
            target_cam, pool, min(k_views + 1, len(pool))
        )
        ref_ids = [train_cams[j] for j in local if train_cams[j] != target_idx]
        ref_ids = ref_ids[:k_views]

        use_sem = rcfg.use_semantic and step >= semantic_from
        step_rcfg = RenderConfig(**{**rcfg.__dict__, "use_semantic": use_sem})
        refs = make_refs(store, ctx, t, ref_ids, step_rcfg, mcfg)
        dense = rng.random() < tcfg.dense_batch_fraction
        loss, evals = rgb_batch_loss(
            store, ctx, refs, t, target_idx, step_rcfg, mcfg, rng,
            tcfg.rays_per_batch, dense_unmasked=dense,
            dense_samples=getattr(tcfg, "dense_batch_samples", 16),
        )
        val = float(loss.data)
        if not np.isfinite(val):
            raise TrainingDiverged(f"loss became {val} at step {step}")
        loss.backward()
        adam_step(store, tcfg.lr_interp, lr_overrides=lrs,
                  paths=_active_paths(store, step_rcfg))
        total_evals += evals
        rec = {"step": step, "loss_total": val, "loss_rgb": val,
               "loss_spatial": 0.0, "loss_temporal": 0.0,
               "wall_ms": (time.perf_counter() - t0) * 1000.0}
        log.append(rec)
        if on_step is not None:
            on_step(step, store, rec)
        if tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0 \
                and tcfg.log_path:
            save_checkpoint(store, tcfg.log_path + f".step{step + 1}.ckpt")
    if tcfg.log_path:
        with open(tcfg.log_path, "w") as f:
            for rec in log:
                f.write(json.dumps(rec) + "\n")
    return {"log": log, "net_evals": total_evals}


# ---------------------------------------------------------------------------
# trajectory-aware refinement
# ---------------------------------------------------------------------------

@dataclass
class RefineResult:
    log: list
    net_evals: int
    plan: dict
    cameras_touched: dict


def refine_on_trajectory(store: ParamStore, traj: Trajectory,
                         dataset: Dataset, weights: LossWeights, steps: int,
                         tcfg: TrainConfig, rcfg: RenderConfig,
                         mcfg: ModelConfig, k_views: int = 4,
                         grid_resolution: int = 64, on_step=None,
                         ctx: DatasetContext | None = None,
                         init_fine_from_coarse: bool = True) -> RefineResult:
    """Fine-tune along a designed path: per step, draw a path position,
    resolve its frame + K related cameras, and take one Adam step on
    lambda1 * rgb + lambda2 * spatial + lambda3 * temporal.

    Only the planned K cameras per frame are ever read; the auxiliary
    feature extractor stays frozen.
    """
    if ctx is None:
        ctx = DatasetContext(dataset, grid_resolution)
    store.freeze("extractor.aux")
    template = dataset.frames[0].cameras[0]
    rig = dataset.frames[0].cameras
    plan = frame_camera_plan(traj, rig, k_views, max(traj.n_stops, 8), template)
    for t in plan:
        if not (0 <= t < dataset.n_frames):
            raise ValueError(f"trajectory touches frame {t} outside dataset")
    if init_fine_from_coarse and rcfg.fine_samples > 0 \
            and store.step_count == 0:
        for k in list(store.params):
            if k.startswith("interp.coarse."):
                fk = k.replace("interp.coarse.", "interp.fine.")
                store.params[fk].data[...] = store.params[k].data

    lrs = _lr_map(tcfg)
    downscale = tcfg.spatial_downscale
    log = []
    total_evals = 0
    log_before = {t: set(c) for t, c in ctx.access_log.items()}
    t0 = time.perf_counter()
    for step in range(steps):
        rng_pick = np.random.default_rng([tcfg.seed, step, 0])
        rng_rgb = np.random.default_rng([tcfg.seed, step, 1])
        rng_spatial = np.random.default_rng([tcfg.seed, step, 2])
        rng_temporal = np.random.default_rng([tcfg.seed, step, 3])

        u = float(rng_pick.random())
        cam_v, ft = camera_at(traj, u, template)
        t = min(max(int(np.floor(ft + 0.5)), 0), dataset.n_frames - 1)
        if t not in plan:
            t = min(plan.keys(), key=lambda q: abs(q - t))
        ref_ids = plan[t]
        refs = make_refs(store, ctx, t, ref_ids, rcfg, mcfg)

        terms = {"loss_rgb": 0.0, "loss_spatial": 0.0, "loss_temporal": 0.0}
        loss = None

        if weights.lambda1 > 0:
            cam_idx = int(ref_ids[rng_rgb.integers(len(ref_ids))])
            lr_term, ev = rgb_batch_loss(
                store, ctx, refs, t, cam_idx, rcfg, mcfg, rng_rgb,
                tcfg.refine_rgb_rays,
                dense_unmasked=not rcfg.use_hull,
                dense_samples=rcfg.dense_samples,
            )
            total_evals += ev
            terms["loss_rgb"] = float(lr_term.data)
            loss = lr_term * weights.lambda1

        target_render = None
        cam_lo = scale_camera(cam_v, downscale)
        if weights.lambda2 > 0:
            ls_term, target_render, _, ev = loss_spatial(
                store, ctx, refs, cam_v, t, ref_ids, rcfg, mcfg,
                rng_spatial, rays_per_view=tcfg.spatial_rays,
                downscale=downscale,
            )
            total_evals += ev
            terms["loss_spatial"] = float(ls_term.data)
            add = ls_term * weights.lambda2
            loss = add if loss is None else loss + add

        if weights.lambda3 > 0 and t > 0:
            lt_term, ev = _temporal_term(
                store, ctx, t, cam_lo, target_render, plan, rcfg, mcfg,
                rng_temporal, tcfg,
            )
            total_evals += ev
            terms["loss_temporal"] = float(lt_term.data)
            add = lt_term * weights.lambda3
            loss = add if loss is None else loss + add

        if loss is None:
            raise ValueError("all loss weights are zero")
        val = float(loss.data)
        if not np.isfinite(val):
            raise TrainingDiverged(f"loss became {val} at step {step}")
        loss.backward()
        adam_step(store, tcfg.lr_interp, lr_overrides=lrs,
                  paths=_active_paths(store, rcfg))
        rec = {"step": step, "loss_total": val, **terms,
               "wall_ms": (time.perf_counter() - t0) * 1000.0}
        log.append(rec)
        if on_step is not None:
            on_step(step, store, rec)
    if tcfg.log_path:
        with open(tcfg.log_path, "w") as f:
            for rec in log:
                f.write(json.dumps(rec) + "\n")
    touched = {
        t: sorted(c - log_before.get(t, set()))
        for t, c in ctx.access_log.items()
        if c - log_before.get(t, set())
    }
    return RefineResult(log=log, net_evals=total_evals, plan=plan,
                        cameras_touched=touched)


def _temporal_term(store, ctx, t, cam_lo, target_render, plan, rcfg, mcfg,
                   rng, tcfg):
    """Temporal consistency on a pixel batch at the (downscaled) target pose:
    render frame t-1 at sampled pixels and compare with the frame-t render
    warped by the geometry flow (t-1 -> t mapping)."""
    near, far = ctx.near_far(cam_lo)
    grid_t = ctx.grid(t)
    grid_p = ctx.grid(t - 1)
    if rcfg.use_hull:
        corr = ctx.correspondence(t - 1, t)
        smap_flat = sfs.span_map(grid_p, cam_lo, near, far)
        flow = flow_from_geometry(grid_p, grid_t, cam_lo, near, far,
                                  ctx.flow_rho, corr,
                                  dmap=smap_flat[:, :, 0])
        smap_p = smap_flat.reshape(-1, 2)
        cand = np.flatnonzero(flow.valid.reshape(-1))
    else:
        h, w = cam_lo.height, cam_lo.width
        flow = Flow(np.zeros((h, w, 2), np.float32), np.ones((h, w), bool))
        cand = np.arange(h * w)
    if len(cand) == 0:
        return Tensor(0.0), 0

    if target_render is None:
        refs_t = make_refs(store, ctx, t, plan[t], rcfg, mcfg)
        target_render = render_image(
            store.params, refs_t, cam_lo, grid_t if rcfg.use_hull else None,
            rcfg, mcfg, near, far, rng=rng,
        )
    evals = 0

    pixels = _pick_pixels(rng, cand, tcfg.temporal_rays)
    ref_ids_p = plan.get(t - 1, plan[t])
    refs_p = make_refs(store, ctx, t - 1, ref_ids_p, rcfg, mcfg)
    if rcfg.use_hull:
        ok = ~np.isnan(smap_p[pixels, 0])
        pixels = pixels[ok]
        if len(pixels) == 0:
            return Tensor(0.0), 0
        spans = smap_p[pixels].astype(np.float32)
    else:
        spans = None
    rr = _render_pixel_batch(
        store, refs_p, cam_lo, grid_p if rcfg.use_hull else None,
        pixels, spans, rcfg, mcfg, near, far, rng,
    )
    evals += rr.net_evals

    ys, xs = np.divmod(pixels, cam_lo.width)
    sx = xs + 0.5 + flow.disp[ys, xs, 0] - 0.5
    sy = ys + 0.5 + flow.disp[ys, xs, 1] - 0.5
    img_chw = target_render.image.transpose(2, 0, 1)
    warped = bilinear_sample(img_chw, sx, sy)
    err = rr.color - warped
    return (err * err).sum() * (0.5 / len(pixels)), evals


# ---------------------------------------------------------------------------
# refinement ablation arms
# ---------------------------------------------------------------------------

ABLATION_ARMS = ("full", "no-sfs", "no-semantic", "no-multiview",
                 "no-temporal")


def ablation_arms() -> tuple:
    return ABLATION_ARMS


def arm_configs(arm: str, rcfg_base: RenderConfig | None = None):
    """Render config + loss weights for one refinement ablation arm: the
    full setup minus exactly one ingredient."""
    base = rcfg_base or RenderConfig(use_semantic=True)
    rcfg = RenderConfig(**base.__dict__)
    rcfg.use_semantic = True
    rcfg.use_hull = True
    weights = LossWeights()
    if arm == "no-sfs":
        rcfg.use_hull = False
        rcfg.dense_samples = max(rcfg.coarse_samples, rcfg.dense_samples // 4)
    elif arm == "no-semantic":
        rcfg.use_semantic = False
    elif arm == "no-multiview":
        weights = LossWeights(lambda2=0.0)
    elif arm == "no-temporal":
        weights = LossWeights(lambda3=0.0)
    elif arm != "full":
        raise ValueError(f"unknown ablation arm {arm!r}")
    return rcfg, weights


def run_refinement_arm(arm: str, store: ParamStore, dataset: Dataset,
                       traj: Trajectory, steps: int, seed: int,
                       mcfg: ModelConfig, k_views: int = 4,
                       grid_resolution: int = 64,
                       rcfg_base: RenderConfig | None = None,
                       gt_cache: dict | None = None, n_stops: int = 8,
                       ctx: DatasetContext | None = None):
    """Refine a copy of `store` under one ablation arm and score it at the
    trajectory stops; returns (psnr, training net evals). Evaluation uses
    the arm's own inference settings so each arm is scored as it renders."""
    rcfg, weights = arm_configs(arm, rcfg_base)
    tcfg = TrainConfig(seed=seed)
    work = store.copy()
    res = refine_on_trajectory(work, traj, dataset, weights, steps, tcfg,
                               rcfg, mcfg, k_views=k_views,
                               grid_resolution=grid_resolution, ctx=ctx)
    val = trajectory_psnr(work, dataset, traj, rcfg, mcfg, n_stops=n_stops,
                          k_views=k_views, grid_resolution=grid_resolution,
                          gt_cache=gt_cache, ctx=ctx)
    return val, res.net_evals


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def eval_holdout(store, dataset: Dataset, holdout, rcfg: RenderConfig,
                 mcfg: ModelConfig, k_views: int = 4,
                 grid_resolution: int = 64, frames=None) -> dict:
    """Mean full-image PSNR over held-out cameras (refs from the rest)."""
    from .metrics import evaluation_report, ssim
    ctx = DatasetContext(dataset, grid_resolution)
    frames = range(dataset.n_frames) if frames is None else frames
    pairs = []
    with no_grad():
        for t in frames:
            fr = dataset.frames[t]
            train_ids = [i for i in range(dataset.n_cameras) if i not in holdout]
            for h in holdout:
                cam = fr.cameras[h]
                pool = [fr.cameras[i] for i in train_ids]
                sel = select_reference_cameras(cam, pool, k_views)
                ref_ids = [train_ids[j] for j in sel]
                refs = make_refs(store, ctx, t, ref_ids, rcfg, mcfg)
                near, far = ctx.near_far(cam)
                out = render_image(
                    store.params, refs, cam,
                    ctx.grid(t) if rcfg.use_hull else None,
                    rcfg, mcfg, near, far,
                )
                pairs.append({
                    "frame": t, "cam": int(h),
                    "psnr": psnr(out.image_np, fr.images[h]),
                    "ssim": ssim(out.image_np, fr.images[h]),
                })
    return evaluation_report(pairs)


def trajectory_stops(traj: Trajectory, dataset: Dataset, n_stops: int):
    template = dataset.frames[0].cameras[0]
    stops = []
    for u in np.linspace(0.0, 1.0, n_stops):
        cam, ft = camera_at(traj, float(u), template)
        t = min(max(int(np.floor(ft + 0.5)), 0), dataset.n_frames - 1)
        stops.append((float(u), cam, t))
    return stops


def trajectory_psnr(store, dataset: Dataset, traj: Trajectory,
                    rcfg: RenderConfig, mcfg: ModelConfig, n_stops: int = 8,
                    k_views: int = 4, grid_resolution: int = 64,
                    gt_cache: dict | None = None,
                    ctx: DatasetContext | None = None) -> float:
    """Mean PSNR of renders at evenly spaced path stops against the
    analytic oracle at the same pose and time."""
    if ctx is None:
        ctx = DatasetContext(dataset, grid_resolution)
    rig = dataset.frames[0].cameras
    vals = []
    with no_grad():
        for u, cam, t in trajectory_stops(traj, dataset, n_stops):
            key = (round(u, 6), t)
            if gt_cache is not None and key in gt_cache:
                gt = gt_cache[key]
            else:
                gt, _ = oracle_render(dataset.scene, cam, t, n_dense=192)
                if gt_cache is not None:
                    gt_cache[key] = gt
            sel = select_reference_cameras(cam, rig, k_views)
            refs = make_refs(store, ctx, t, sel, rcfg, mcfg)
            near, far = ctx.near_far(cam)
            out = render_image(
                store.params, refs, cam,
                ctx.grid(t) if rcfg.use_hull else None,
                rcfg, mcfg, near, far,
            )
            vals.append(psnr(out.image_np, gt))
    return float(np.mean(vals))
