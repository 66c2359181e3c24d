import numpy as np
import pytest

from bullettime.camera import (
    Camera,
    Ray,
    look_at,
    project,
    ray_for_pixel,
    rays_for_pixels,
    select_reference_cameras,
    selection_scores,
)


def identity_cam(w=64, h=48, f=50.0):
    return Camera(fx=f, fy=f, cx=w / 2, cy=h / 2, width=w, height=h,
                  rotation=np.eye(3), translation=np.zeros(3))


def random_cam(rng, w=64, h=48):
    eye = rng.uniform(-3, 3, 3)
    target = rng.uniform(-0.3, 0.3, 3)
    while np.linalg.norm(eye - target) < 1.0:
        eye = rng.uniform(-3, 3, 3)
    rot, trans = look_at(eye, target)
    return Camera(fx=rng.uniform(40, 90), fy=rng.uniform(40, 90),
                  cx=w / 2 + rng.uniform(-2, 2), cy=h / 2 + rng.uniform(-2, 2),
                  width=w, height=h, rotation=rot, translation=trans)


class TestCameraInvariants:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError, match="orthonormal"):
            Camera(fx=50, fy=50, cx=32, cy=24, width=64, height=48,
                   rotation=np.eye(3) * 2.0, translation=np.zeros(3))

    def test_rejects_reflection(self):
        r = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError, match="determinant"):
            Camera(fx=50, fy=50, cx=32, cy=24, width=64, height=48,
                   rotation=r, translation=np.zeros(3))

    def test_rejects_bad_principal_point(self):
        with pytest.raises(ValueError, match="principal"):
            Camera(fx=50, fy=50, cx=99, cy=24, width=64, height=48,
                   rotation=np.eye(3), translation=np.zeros(3))

    def test_ray_invariants(self):
        with pytest.raises(ValueError, match="unit"):
            Ray(origin=np.zeros(3), direction=np.array([0, 0, 2.0]),
                near=1, far=2)
        with pytest.raises(ValueError, match="near"):
            Ray(origin=np.zeros(3), direction=np.array([0, 0, 1.0]),
                near=2, far=1)
        with pytest.raises(ValueError, match="hint"):
            Ray(origin=np.zeros(3), direction=np.array([0, 0, 1.0]),
                near=1, far=2, depth_hint=5.0)


class TestRayForPixel:
    def test_principal_point_is_optical_axis(self):
        cam = identity_cam()
        ray = ray_for_pixel(cam, cam.cx, cam.cy, 0.5, 10.0)
        assert np.allclose(ray.direction, [0, 0, 1], atol=1e-9)
        assert np.allclose(ray.origin, 0.0)

    def test_out_of_frame_rejected(self):
        cam = identity_cam()
        with pytest.raises(ValueError, match="outside"):
            ray_for_pixel(cam, -1.0, 5.0, 0.5, 10.0)
        with pytest.raises(ValueError, match="outside"):
            ray_for_pixel(cam, 5.0, cam.height + 0.5, 0.5, 10.0)

    def test_distinct_pixels_non_parallel(self):
        cam = identity_cam()
        r1 = ray_for_pixel(cam, 10.5, 20.5, 0.5, 10.0)
        r2 = ray_for_pixel(cam, 40.5, 20.5, 0.5, 10.0)
        assert np.linalg.norm(np.cross(r1.direction, r2.direction)) > 1e-6

    def test_projection_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            cam = random_cam(rng)
            px = rng.uniform(0, cam.width - 1e-3)
            py = rng.uniform(0, cam.height - 1e-3)
            ray = ray_for_pixel(cam, px, py, 0.5, 10.0)
            for t in rng.uniform(0.6, 9.0, 3):
                u, v, z = project(cam, ray.origin + t * ray.direction)
                assert z > 0
                assert abs(u - px) < 1e-4 and abs(v - py) < 1e-4

    def test_batched_matches_single(self):
        rng = np.random.default_rng(1)
        cam = random_cam(rng)
        px = rng.uniform(0, cam.width, 16)
        py = rng.uniform(0, cam.height, 16)
        origins, dirs = rays_for_pixels(cam, px, py)
        for i in range(16):
            ray = ray_for_pixel(cam, px[i], py[i], 0.5, 10.0)
            assert np.allclose(dirs[i], ray.direction, atol=1e-12)


class TestProject:
    def test_on_axis_point(self):
        cam = identity_cam()
        u, v, z = project(cam, [0.0, 0.0, 2.0])
        assert (u, v, z) == (cam.cx, cam.cy, 2.0)

    def test_translation_frame_shift(self):
        cam0 = identity_cam()
        shifted = Camera(fx=50, fy=50, cx=32, cy=24, width=64, height=48,
                         rotation=np.eye(3),
                         translation=-np.array([1.0, 0.0, 0.0]))
        p = np.array([1.3, 0.2, 3.0])
        assert np.allclose(project(shifted, p), project(cam0, p - [1, 0, 0]))

    def test_negative_depth_returned_not_raised(self):
        cam = identity_cam()
        _, _, z = project(cam, [0.0, 0.0, -1.0])
        assert z < 0


class TestSelectReferenceCameras:
    def ring(self, n=8, radius=3.0):
        cams = []
        for i in range(n):
            a = 2 * np.pi * i / n
            eye = np.array([radius * np.cos(a), 0.0, radius * np.sin(a)])
            rot, trans = look_at(eye, np.zeros(3))
            cams.append(Camera(fx=50, fy=50, cx=32, cy=24, width=64,
                               height=48, rotation=rot, translation=trans))
        return cams

    def test_exact_match_ranked_first(self):
        pool = self.ring()
        sel = select_reference_cameras(pool[3], pool, 3)
        assert sel[0] == 3

    def test_between_two_cameras(self):
        pool = self.ring()
        a = 2 * np.pi * 2.5 / 8
        eye = np.array([3 * np.cos(a), 0.0, 3 * np.sin(a)])
        rot, trans = look_at(eye, np.zeros(3))
        target = Camera(fx=50, fy=50, cx=32, cy=24, width=64, height=48,
                        rotation=rot, translation=trans)
        # exhaustive-score oracle (same 1e-9 tie quantization as the op)
        scores = np.round(selection_scores(target, pool) / 1e-9) * 1e-9
        want = sorted(range(8), key=lambda i: (scores[i], i))[:2]
        sel = select_reference_cameras(target, pool, 2)
        assert sel == want
        assert set(sel) == {2, 3}

    def test_k_equals_pool_is_permutation(self):
        pool = self.ring()
        sel = select_reference_cameras(pool[0], pool, 8)
        assert sorted(sel) == list(range(8))

    def test_scores_sorted_and_deterministic(self):
        pool = self.ring()
        rng = np.random.default_rng(2)
        target = random_cam(rng)
        sel1 = select_reference_cameras(target, pool, 5)
        sel2 = select_reference_cameras(target, pool, 5)
        assert sel1 == sel2
        scores = selection_scores(target, pool)
        picked = [scores[i] for i in sel1]
        assert all(a <= b + 1e-12 for a, b in zip(picked, picked[1:]))

    def test_rigid_invariance(self):
        pool = self.ring()
        rng = np.random.default_rng(3)
        target = random_cam(rng)
        # one global rigid transform applied to target and pool alike
        ang = 0.7
        g_rot = np.array([
            [np.cos(ang), 0, np.sin(ang)],
            [0, 1, 0],
            [-np.sin(ang), 0, np.cos(ang)],
        ])
        g_shift = np.array([0.3, -0.2, 0.5])

        def moved(c):
            rot = c.rotation @ g_rot.T
            trans = c.translation - rot @ g_shift
            return Camera(fx=c.fx, fy=c.fy, cx=c.cx, cy=c.cy, width=c.width,
                          height=c.height, rotation=rot, translation=trans)

        before = select_reference_cameras(target, pool, 4)
        after = select_reference_cameras(moved(target),
                                         [moved(c) for c in pool], 4)
        assert before == after

    def test_empty_pool_and_bad_k(self):
        pool = self.ring()
        with pytest.raises(ValueError, match="empty"):
            select_reference_cameras(pool[0], [], 1)
        with pytest.raises(ValueError, match="K="):
            select_reference_cameras(pool[0], pool, 9)
