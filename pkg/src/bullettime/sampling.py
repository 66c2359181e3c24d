"""Ray-point sampling: dense stratified, depth-hint windows, hierarchical.

All strategies return a SampleBatch of strictly ascending depths plus the
per-sample intervals used by volume compositing. The batch variants operate
on (R,) arrays of ray parameters and return (R, n) depth matrices; the
single-ray entry points wrap them for a Ray.

Passing rng=None degrades stratified draws to the deterministic midpoint
rule (bin centers), which is what the analytic oracle renderer uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Ray

PDF_EPS = 1e-5


@dataclass
class SampleBatch:
    depths: np.ndarray   # (..., n), strictly ascending along the last axis
    deltas: np.ndarray   # (..., n); last entry is the capped trailing interval
    stage: str           # "coarse" | "fine" | "dense"

    def __post_init__(self):
        self.depths = np.asarray(self.depths, dtype=np.float32)
        self.deltas = np.asarray(self.deltas, dtype=np.float32)
        if self.depths.shape != self.deltas.shape:
            raise ValueError("depths/deltas shape mismatch")

    @property
    def n(self) -> int:
        return self.depths.shape[-1]


def compute_deltas(depths: np.ndarray, span_fallback) -> np.ndarray:
    """delta_k = t_{k+1} - t_k; the trailing interval is capped at the mean
    gap (or the window span when there is a single sample)."""
    depths = np.asarray(depths, dtype=np.float32)
    n = depths.shape[-1]
    deltas = np.empty_like(depths)
    if n == 1:
        deltas[..., 0] = span_fallback
        return deltas
    gaps = np.diff(depths, axis=-1)
    deltas[..., :-1] = gaps
    deltas[..., -1] = gaps.mean(axis=-1)
    return deltas


def dense_stratified_batch(near, far, n: int, rng) -> np.ndarray:
    """One draw per equal-width bin of [near, far per ray]; (R, n) depths."""
    near = np.atleast_1d(np.asarray(near, dtype=np.float32))
    far = np.atleast_1d(np.asarray(far, dtype=np.float32))
    r = near.shape[0]
    edges = np.linspace(0.0, 1.0, n + 1, dtype=np.float32)
    u = rng.random((r, n), dtype=np.float32) if rng is not None else np.full(
        (r, n), 0.5, dtype=np.float32
    )
    frac = edges[:-1] + u * (1.0 / n)
    return near[:, None] + frac * (far - near)[:, None]


def dense_stratified(ray: Ray, n: int, rng=None) -> SampleBatch:
    if n < 1:
        raise ValueError("need at least one sample")
    depths = dense_stratified_batch(ray.near, ray.far, n, rng)[0]
    return SampleBatch(depths, compute_deltas(depths, ray.far - ray.near), "dense")


def coarse_window(near, far, hint, range_r: float):
    """Clipped sampling window [max(near, d-r), min(far, d+r)] per ray."""
    lo = np.maximum(near, hint - range_r)
    hi = np.minimum(far, hint + range_r)
    return lo, hi


def coarse_near_depth_batch(near, far, hint, n: int, range_r) -> np.ndarray:
    """`range_r` may be a scalar or per-ray array."""
    near = np.atleast_1d(np.asarray(near, dtype=np.float32))
    far = np.atleast_1d(np.asarray(far, dtype=np.float32))
    hint = np.atleast_1d(np.asarray(hint, dtype=np.float32))
    lo, hi = coarse_window(near, far, hint, np.asarray(range_r, np.float32))
    if n == 1:
        return (0.5 * (lo + hi))[:, None]
    frac = np.linspace(0.0, 1.0, n, dtype=np.float32)
    return lo[:, None] + frac * (hi - lo)[:, None]


def coarse_near_depth(ray: Ray, n: int, range_r: float) -> SampleBatch:
    """Evenly spaced samples around the ray's visual-hull depth hint."""
    if ray.depth_hint is None:
        raise ValueError("ray has no depth hint; fall back to dense sampling")
    if range_r <= 0:
        raise ValueError("range_r must be positive")
    depths = coarse_near_depth_batch(
        ray.near, ray.far, ray.depth_hint, n, range_r
    )[0]
    lo, hi = coarse_window(ray.near, ray.far, ray.depth_hint, range_r)
    return SampleBatch(depths, compute_deltas(depths, hi - lo), "coarse")


def sample_pdf(depths: np.ndarray, deltas: np.ndarray, weights: np.ndarray,
               m: int, rng, eps: float = PDF_EPS) -> np.ndarray:
    """Inverse-transform draws from the piecewise-constant PDF over the
    coarse intervals [t_k, t_k + delta_k]; returns (R, m) unsorted depths."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        w = w[None, :]
    w = w + eps
    dead = w.sum(axis=-1) <= 0.0
    if dead.any():
        w[dead] = 1.0  # uniform fallback over the coarse span
    cdf = np.cumsum(w, axis=-1)
    cdf /= cdf[:, -1:]
    r = cdf.shape[0]
    u = rng.random((r, m)) if rng is not None else (
        (np.arange(m) + 0.5) / m
    )[None, :].repeat(r, axis=0)
    idx = (u[:, :, None] >= cdf[:, None, :]).sum(axis=-1)
    lo_cdf = np.concatenate([np.zeros((r, 1)), cdf[:, :-1]], axis=-1)
    rows = np.arange(r)[:, None]
    c0 = lo_cdf[rows, idx]
    c1 = cdf[rows, idx]
    frac = (u - c0) / np.maximum(c1 - c0, 1e-12)
    t0 = depths[rows, idx]
    return (t0 + frac * deltas[rows, idx]).astype(np.float32)


def hierarchical_fine_batch(depths, deltas, weights, m: int, rng,
                            eps: float = PDF_EPS):
    """Merge m PDF draws with the coarse depths; (R, n+m) sorted."""
    fine = sample_pdf(depths, deltas, weights, m, rng, eps)
    merged = np.sort(np.concatenate([depths, fine], axis=-1), axis=-1)
    return merged


def hierarchical_fine(coarse: SampleBatch, weights, m: int, rng=None,
                      eps: float = PDF_EPS) -> SampleBatch:
    """Fine samples from the coarse compositing weights, NeRF style."""
    weights = np.asarray(weights, dtype=np.float32)
    if weights.shape[-1] != coarse.n:
        raise ValueError(
            f"{weights.shape[-1]} weights for {coarse.n} coarse samples"
        )
    depths2 = np.atleast_2d(coarse.depths)
    deltas2 = np.atleast_2d(coarse.deltas)
    merged = hierarchical_fine_batch(depths2, deltas2, weights, m, rng, eps)
    if coarse.depths.ndim == 1:
        merged = merged[0]
    span = coarse.depths[..., -1] + coarse.deltas[..., -1] - coarse.depths[..., 0]
    return SampleBatch(merged, compute_deltas(merged, span), "fine")
