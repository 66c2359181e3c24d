"""Configuration objects shared by the renderer, trainers, CLI and service."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field


@dataclass
class ModelConfig:
    """Network architecture knobs (fixed at init time, stored next to
    checkpoints as a JSON sidecar)."""

    base_channels: int = 16        # conv width inside both extractors
    feat_channels: int = 16        # light extractor output channels
    aux_channels: int = 16         # auxiliary (semantic-stand-in) output
    light_blocks: int = 3          # residual blocks, light extractor
    aux_blocks: int = 6            # residual blocks, auxiliary extractor
    upconv_factor: int = 2
    enc_hidden: int = 64
    head_hidden: int = 64
    sigma_scale: float = 20.0      # fixed gain after the softplus density head

    @property
    def point_dim(self) -> int:
        # per-view MLP input: light + aux features, source rgb, relative dir
        return self.feat_channels + self.aux_channels + 3 + 3


@dataclass
class RenderConfig:
    """Per-render sampling and shading settings."""

    coarse_samples: int = 10       # preview default
    fine_samples: int = 0          # refinement runs use 64 + 64
    k_views: int = 4
    range_factor: float = 4.0      # depth-hint window = factor * voxel_size
    clamp_exit: bool = True        # clip the window at the hull's back face
    front_pad: float = 0.0         # voxels of window ahead of the hull entry
    use_semantic: bool = False     # feed auxiliary features (zeros when off)
    use_hull: bool = True          # depth hints + miss skipping from the grid
    dense_samples: int = 64        # per-ray count when use_hull is off
    background: tuple = (0.05, 0.05, 0.07)

    def total_samples(self) -> int:
        return self.coarse_samples + self.fine_samples


PREVIEW = RenderConfig()
REFINED = RenderConfig(coarse_samples=64, fine_samples=64, use_semantic=True)


@dataclass
class TrainConfig:
    rays_per_batch: int = 400        # pretraining photometric batches
    refine_rgb_rays: int = 256       # photometric term inside refinement
    lr_extractor: float = 1e-3
    lr_interp: float = 5e-4
    lambda1: float = 0.5
    lambda2: float = 0.25
    lambda3: float = 0.25
    dense_batch_fraction: float = 0.25   # pretrain batches sampled densely,
                                         # unmasked, to supervise empty space
    dense_batch_samples: int = 16
    semantic_warmup_fraction: float = 0.2  # trailing fraction of pretrain run
                                           # with the auxiliary branch active
    spatial_rays: int = 128
    temporal_rays: int = 192
    spatial_downscale: int = 2           # target-view render scale divisor
                                         # inside the refinement loop
    checkpoint_every: int = 0
    log_path: str | None = None
    seed: int = 42


def to_json(cfg) -> dict:
    return dataclasses.asdict(cfg)


def from_json(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    kw = {k: v for k, v in d.items() if k in names}
    obj = cls(**kw)
    for f in dataclasses.fields(cls):
        v = getattr(obj, f.name)
        if isinstance(v, list):
            setattr(obj, f.name, tuple(v))
    return obj


def save_config(cfg, path: str) -> None:
    with open(path, "w") as f:
        json.dump(to_json(cfg), f, indent=2, sort_keys=True)


def load_config(cls, path: str):
    with open(path) as f:
        return from_json(cls, json.load(f))
