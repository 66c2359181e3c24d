import numpy as np
import pytest

from bullettime.camera import Ray
from bullettime.sampling import (
    SampleBatch,
    coarse_near_depth,
    dense_stratified,
    hierarchical_fine,
)


def make_ray(near=1.0, far=3.0, hint=None):
    return Ray(origin=np.zeros(3), direction=np.array([0, 0, 1.0]),
               near=near, far=far, depth_hint=hint)


def assert_batch_valid(batch: SampleBatch, near, far):
    d = batch.depths
    assert (np.diff(d) > 0).all(), "depths must be strictly ascending"
    assert d.min() >= near - 1e-6 and d.max() <= far + 1e-6
    if batch.n > 1:
        assert np.allclose(batch.deltas[:-1], np.diff(d), atol=1e-6)
        assert abs(batch.deltas[-1] - np.diff(d).mean()) < 1e-5


class TestDenseStratified:
    def test_single_sample_inside(self):
        b = dense_stratified(make_ray(), 1, np.random.default_rng(0))
        assert 1.0 <= b.depths[0] <= 3.0

    def test_midpoint_rule(self):
        b = dense_stratified(make_ray(1.0, 3.0), 4, rng=None)
        want = 1.0 + (np.arange(4) + 0.5) * 0.5
        assert np.allclose(b.depths, want, atol=1e-6)
        assert b.stage == "dense"

    def test_stratification_and_uniformity(self):
        # per-bin occupancy is always exactly one; bin means match the
        # uniform expectation within 3 standard errors
        rng = np.random.default_rng(1)
        n = 8
        draws = np.stack(
            [dense_stratified(make_ray(0.0 + 1.0, 2.0 + 1.0), n, rng).depths
             for _ in range(10_000)]
        )
        edges = 1.0 + np.linspace(0, 2.0, n + 1)
        for k in range(n):
            inside = (draws[:, k] >= edges[k] - 1e-6) & (
                draws[:, k] <= edges[k + 1] + 1e-6
            )
            assert inside.all()
            mean = draws[:, k].mean()
            want = (edges[k] + edges[k + 1]) / 2
            se = (edges[k + 1] - edges[k]) / np.sqrt(12 * 10_000)
            assert abs(mean - want) < 3 * se

    def test_batch_invariants_fuzz(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            near = rng.uniform(0.5, 2.0)
            far = near + rng.uniform(0.5, 3.0)
            b = dense_stratified(make_ray(near, far), int(rng.integers(1, 33)),
                                 rng)
            assert_batch_valid(b, near, far)


class TestCoarseNearDepth:
    def test_spacing_and_symmetry(self):
        b = coarse_near_depth(make_ray(1.0, 3.0, hint=2.0), 10, 0.2)
        assert b.stage == "coarse"
        assert np.allclose(np.diff(b.depths), 0.4 / 9, atol=1e-6)
        assert abs(b.depths.mean() - 2.0) < 1e-6

    def test_window_clipped_at_near(self):
        b = coarse_near_depth(make_ray(1.0, 3.0, hint=1.05), 5, 0.2)
        assert abs(b.depths[0] - 1.0) < 1e-6

    def test_all_samples_in_window(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            near = rng.uniform(0.5, 1.5)
            far = near + rng.uniform(1.0, 3.0)
            hint = rng.uniform(near, far)
            r = rng.uniform(0.05, 0.5)
            b = coarse_near_depth(make_ray(near, far, hint=hint),
                                  int(rng.integers(2, 20)), r)
            assert b.depths.min() >= max(near, hint - r) - 1e-6
            assert b.depths.max() <= min(far, hint + r) + 1e-6
            assert_batch_valid(b, near, far)

    def test_missing_hint_rejected(self):
        with pytest.raises(ValueError, match="hint"):
            coarse_near_depth(make_ray(), 5, 0.2)


class TestHierarchicalFine:
    def coarse(self, n=8):
        return coarse_near_depth(make_ray(1.0, 3.0, hint=2.0), n, 0.5)

    def test_delta_pdf_lands_in_one_bin(self):
        c = self.coarse()
        w = np.zeros(c.n)
        j = 3
        w[j] = 1.0
        fine = hierarchical_fine(c, w, 16, np.random.default_rng(4), eps=0.0)
        new = np.setdiff1d(fine.depths, c.depths)
        lo = c.depths[j]
        hi = c.depths[j] + c.deltas[j]
        assert len(new) == 16
        assert (new >= lo - 1e-6).all() and (new <= hi + 1e-6).all()

    def test_sorted_and_sized(self):
        c = self.coarse()
        fine = hierarchical_fine(c, np.ones(c.n), 12, np.random.default_rng(5))
        assert fine.n == c.n + 12
        assert (np.diff(fine.depths) >= 0).all()
        assert fine.stage == "fine"

    def test_uniform_weights_chi_square(self):
        # fine samples under uniform weights spread uniformly over the bins:
        # chi-square GOF over 10^4 draws must not reject at alpha = 0.01
        from scipy import stats
        c = self.coarse(8)
        rng = np.random.default_rng(6)
        draws = []
        for _ in range(625):
            f = hierarchical_fine(c, np.ones(c.n), 16, rng)
            draws.append(np.setdiff1d(f.depths, c.depths))
        all_draws = np.concatenate(draws)
        edges = np.concatenate([c.depths, [c.depths[-1] + c.deltas[-1]]])
        counts, _ = np.histogram(all_draws, bins=edges)
        widths = np.diff(edges)
        expected = len(all_draws) * widths / widths.sum()
        chi2 = ((counts - expected) ** 2 / expected).sum()
        crit = stats.chi2.ppf(0.99, df=len(counts) - 1)
        assert chi2 < crit, f"chi2 {chi2:.1f} >= {crit:.1f}"

    def test_bin_counts_match_weights_3sigma(self):
        c = self.coarse(6)
        rng = np.random.default_rng(7)
        w = np.array([0.05, 0.3, 0.05, 0.4, 0.1, 0.1])
        m = 20
        trials = 500
        counts = np.zeros(6)
        edges = np.concatenate([c.depths, [c.depths[-1] + c.deltas[-1]]])
        for _ in range(trials):
            f = hierarchical_fine(c, w, m, rng, eps=0.0)
            new = np.setdiff1d(f.depths, c.depths)
            counts += np.histogram(new, bins=edges)[0]
        total = trials * m
        p = w / w.sum()
        sd = np.sqrt(total * p * (1 - p))
        assert (np.abs(counts - total * p) < 3.5 * sd).all()

    def test_zero_weights_fall_back_to_uniform(self):
        c = self.coarse(4)
        f = hierarchical_fine(c, np.zeros(4), 8, np.random.default_rng(8),
                              eps=0.0)
        span_lo = c.depths[0]
        span_hi = c.depths[-1] + c.deltas[-1]
        new = np.setdiff1d(f.depths, c.depths)
        assert (new >= span_lo).all() and (new <= span_hi).all()

    def test_weight_length_mismatch(self):
        with pytest.raises(ValueError, match="weights"):
            hierarchical_fine(self.coarse(5), np.ones(4), 3)
