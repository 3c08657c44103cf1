import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from tassn import autodiff as ad
from tassn import losses
from tassn import render as rd

from .oracles import central_difference

CAM = rd.Camera(fx=60.0, fy=60.0, cx=32.0, cy=32.0, z_root=400.0)


def full_cover_mesh(cam, w, h, pad=20.0):
    """One triangle at z = 0 whose projection contains the image grown by ``pad`` pixels."""
    corners = np.array([[-pad, -pad], [2 * w + 3 * pad, -pad], [-pad, 2 * h + 3 * pad]])
    xy = (corners - [cam.cx, cam.cy]) * cam.z_root / np.array([cam.fx, cam.fy])
    verts = np.concatenate([xy, np.zeros((3, 1))], axis=1)
    return verts, np.array([[0, 1, 2]])


def quad_mesh(cam, x0, y0, x1, y1):
    """Axis-aligned rectangle in pixel space made of two triangles at z = 0."""
    corners = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)
    xy = (corners - [cam.cx, cam.cy]) * cam.z_root / np.array([cam.fx, cam.fy])
    return np.concatenate([xy, np.zeros((4, 1))], axis=1), np.array([[0, 1, 2], [0, 2, 3]])


def random_triangles_2d(rng, count, w, h):
    centers = rng.uniform(4, w - 4, (count, 1, 2))
    verts = (centers + rng.normal(0, 5, (count, 3, 2))).reshape(-1, 2)
    return verts, np.arange(3 * count).reshape(count, 3)


class TestProject:
    def test_principal_point(self):
        cam = rd.Camera(50.0, 50.0, 32.0, 32.0, 300.0)
        assert_allclose(rd.project(cam, [[0.0, 0.0, 0.0]]).data, [[32, 32]])

    def test_similar_triangles(self):
        cam = rd.Camera(50.0, 70.0, 32.0, 30.0, 300.0)
        assert_allclose(rd.project(cam, [[cam.z_root / cam.fx * 10, 0.0, 0.0]]).data, [[42, 30]], rtol=1e-14)

    def test_matches_numpy(self, rng):
        pts = rng.normal(0, 50, (5, 3))
        assert_allclose(rd.project(CAM, pts).data, rd.project_np(CAM, pts), rtol=1e-14)

    def test_jacobian_fd(self, rng):
        pts = ad.Tensor(rng.normal(0, 50, (6, 3)), requires_grad=True)
        w = ad.Tensor(rng.standard_normal((6, 2)))
        report = ad.check_gradient(lambda: ad.sum(w * rd.project(CAM, pts)), pts)
        assert report.passed, str(report)

    def test_behind_camera(self):
        with pytest.raises(rd.BehindCameraError):
            rd.project(CAM, [[0.0, 0.0, -400.0]])

    def test_focal_must_be_positive(self):
        with pytest.raises(ValueError):
            rd.Camera(0.0, 1.0, 0.0, 0.0, 1.0)


class TestRasterize:
    def test_offscreen_mesh_empty(self):
        verts, faces = full_cover_mesh(CAM, 64, 64, pad=5.0)
        far = verts + [5000.0, 0.0, 0.0]
        s = rd.rasterize_silhouette(CAM, far, faces, 64, 64).data
        assert s.max() <= 1e-3

    def test_full_cover_saturates(self):
        verts, faces = full_cover_mesh(CAM, 64, 64)
        s = rd.rasterize_silhouette(CAM, verts, faces, 64, 64, tau=0.5).data
        assert s[2:-2, 2:-2].min() >= 0.99
        assert s.max() <= 1.0

    def test_values_in_unit_interval(self, rng):
        verts, faces = random_triangles_2d(rng, 30, 32, 32)
        s = rd.soft_silhouette_2d(verts, faces, 32, 32, tau=1.0).data
        assert s.min() >= 0.0 and s.max() <= 1.0

    def test_product_formula(self, rng):
        """Coverage equals one minus the product of per-face sigmoid complements."""
        verts, faces = random_triangles_2d(rng, 3, 12, 12)
        tau = 0.8
        s = rd.soft_silhouette_2d(verts, faces, 12, 12, tau=tau, margin=1e6).data
        expected = np.ones((12, 12))
        for f in faces:
            single = rd.soft_silhouette_2d(verts, f[None], 12, 12, tau=tau, margin=1e6).data
            expected *= 1.0 - single
        assert_allclose(s, 1.0 - expected, rtol=1e-12, atol=1e-14)

    def test_signed_distance_single_triangle(self):
        """Brute-force point-to-segment distances give the expected sigmoid values."""
        tri = np.array([[1.0, 1.0], [7.0, 1.5], [3.0, 6.5]])
        tau = 0.7
        s = rd.soft_silhouette_2d(tri, np.array([[0, 1, 2]]), 8, 8, tau=tau, margin=1e6).data
        for i in range(8):
            for j in range(8):
                p = np.array([j + 0.5, i + 0.5])
                dists = []
                for e in range(3):
                    a, b = tri[e], tri[(e + 1) % 3]
                    t = np.clip(np.dot(p - a, b - a) / np.dot(b - a, b - a), 0, 1)
                    dists.append(np.linalg.norm(p - a - t * (b - a)))
                crosses = []
                for e in range(3):
                    ed, r = tri[(e + 1) % 3] - tri[e], p - tri[e]
                    crosses.append(ed[0] * r[1] - ed[1] * r[0])
                inside = all(c >= 0 for c in crosses) or all(c <= 0 for c in crosses)
                d = min(dists) * (1 if inside else -1)
                assert s[i, j] == pytest.approx(1 / (1 + np.exp(-d / tau)), rel=1e-12)

    def test_degenerate_triangle_contributes_nothing(self):
        tri = np.array([[1.0, 1.0], [4.0, 4.0], [7.0, 7.0]])
        s = rd.soft_silhouette_2d(tri, np.array([[0, 1, 2]]), 8, 8, tau=0.5).data
        assert_array_equal(s, np.zeros((8, 8)))

    def test_tau_positive(self):
        with pytest.raises(ValueError):
            rd.soft_silhouette_2d(np.zeros((3, 2)), np.array([[0, 1, 2]]), 4, 4, tau=0.0)

    def test_monotone_in_faces(self):
        for fixture in range(20):
            rng = np.random.default_rng([31, fixture])
            verts, faces = random_triangles_2d(rng, 8, 24, 24)
            k = int(rng.integers(1, 8))
            tau = float(rng.uniform(0.3, 1.5))
            fewer = rd.soft_silhouette_2d(verts, faces[:k], 24, 24, tau=tau).data
            more = rd.soft_silhouette_2d(verts, faces, 24, 24, tau=tau).data
            assert np.all(more >= fewer)

    def test_translation_equivariance(self):
        rng = np.random.default_rng(3)
        verts, faces = random_triangles_2d(rng, 5, 32, 32)
        verts = np.clip(verts, 6, 24)
        a = rd.soft_silhouette_2d(verts, faces, 32, 32, tau=0.5).data
        b = rd.soft_silhouette_2d(verts + [1.0, 0.0], faces, 32, 32, tau=0.5).data
        assert np.abs(b[:, 1:-1] - a[:, :-2]).max() <= 0.02

    def test_shared_edge_seam(self):
        """Inside two faces at distance zero from both, coverage is 1 - 0.5 * 0.5."""
        verts = np.array([[0.0, 0.0], [8.0, 0.0], [8.0, 8.0], [0.0, 8.0]])
        s = rd.soft_silhouette_2d(verts, np.array([[0, 1, 2], [0, 2, 3]]), 8, 8, tau=0.5).data
        assert s[3, 3] == pytest.approx(0.75, rel=1e-12)

    def test_translation_equivariance_in_millimetres(self):
        verts, faces = quad_mesh(CAM, 20.3, 18.7, 41.2, 44.9)
        shift = CAM.z_root / CAM.fx
        a = rd.rasterize_silhouette(CAM, verts, faces, 64, 64, tau=0.5).data
        b = rd.rasterize_silhouette(CAM, verts + [shift, 0.0, 0.0], faces, 64, 64, tau=0.5).data
        assert np.abs(b[:, 1:-1] - a[:, :-2]).max() <= 0.02

    def test_batched_equals_single(self, rng):
        verts, faces = random_triangles_2d(rng, 4, 16, 16)
        batch = np.stack([verts, verts + 1.3])
        out = rd.soft_silhouette_2d(batch, faces, 16, 16).data
        for k in range(2):
            assert_allclose(out[k], rd.soft_silhouette_2d(batch[k], faces, 16, 16).data, rtol=1e-14)

    def test_silhouette_loss_gradient(self):
        """Analytic gradient of the silhouette loss w.r.t. vertices on an 8x8 image."""
        verts = np.array([[30.0, 30.0, 0.0], [55.0, 28.0, 10.0], [33.0, 60.0, -5.0], [58.0, 62.0, 3.0]])
        cam = rd.Camera(8.0, 8.0, 4.0, 4.0, 100.0)
        faces = np.array([[0, 1, 2], [1, 3, 2]])
        target = np.zeros((8, 8))
        target[3:7, 2:6] = 1.0
        x = ad.Tensor(verts / 10.0, requires_grad=True)

        def loss():
            s = rd.rasterize_silhouette(cam, x * 10.0 - 15.0, faces, 8, 8, tau=1.0)
            return losses.silhouette_loss(s, target)

        report = ad.check_gradient(loss, x)
        assert report.passed, str(report)
        with ad.CompGraph() as g:
            out = loss()
        x.zero_grad()
        g.backpropagate(out)

        def numeric(v):
            s = rd.rasterize_silhouette(cam, v * 10.0 - 15.0, faces, 8, 8, tau=1.0).data
            return float(np.sum((s - target) ** 2))

        assert_allclose(x.grad, central_difference(numeric, x.data), rtol=1e-5, atol=1e-8)


class TestHardSilhouette:
    def test_soft_threshold_agrees(self, clip):
        from tassn import synth

        mesh = clip.mesh3d_gt()
        faces = synth.hand.build_template().faces
        disagreement = []
        for t in range(clip.num_frames):
            soft = rd.rasterize_silhouette(clip.camera, mesh[t], faces, 64, 64, tau=0.1).data
            disagreement.append(np.mean((soft >= 0.5) != (clip.silhouettes[t] > 0.5)))
        assert max(disagreement) <= 0.01

    def test_full_cover(self):
        verts, faces = full_cover_mesh(CAM, 64, 64)
        assert_array_equal(rd.hard_silhouette(CAM, verts, faces, 64, 64), np.ones((64, 64)))


def test_pgm_round_trip(tmp_path, rng):
    img = rng.uniform(0, 1, (5, 7))
    rd.write_pgm(tmp_path / "s.pgm", img)
    back = rd.read_pgm(tmp_path / "s.pgm")
    assert back.shape == (5, 7)
    assert_array_equal(back, np.round(img * 255).astype(np.uint8))
    assert (tmp_path / "s.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")
