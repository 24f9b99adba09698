import numpy as np
import numpy.testing as npt
import pytest

from mvrecon import body as bd
from mvrecon import camera as cam
from mvrecon import evaluate as ev
from mvrecon import geometry as geo
from mvrecon import neural as nn
from mvrecon import pipeline as pl
from mvrecon import scenegen as sg


def tiny_config(**overrides):
    base = dict(coarse_res=64, fine_res=128, volume_res=32,
                c_coarse=8, c_volume=4, c_fine=8,
                d_k=16, n_head=2, encoder_depth=1, d_ff=24,
                mlp_hidden=32, omega_dim=16,
                points_per_step=256, lr=2e-3, seed=0,
                occlusion_augment_prob=0.0)
    base.update(overrides)
    return pl.PipelineConfig(**base)


def synthetic_sample(rng, n_views=2, coarse_res=32, fine_res=32,
                     volume_res=8) -> pl.SceneSample:
    """Random arrays shaped like a real scene; enough for query/grad tests."""
    cams = cam.camera_ring(n_views, 2.5, 1.0, (0, 0.9, 0),
                           fx=550.0 * fine_res / 512, width=fine_res,
                           height_px=fine_res)
    body = None
    views = pl.PersonViews(
        cameras=cams,
        coarse_images=rng.random((n_views, 3, coarse_res, coarse_res)).astype(np.float32),
        coarse_masks=np.ones((n_views, coarse_res, coarse_res), np.float32),
        coarse_depths=np.full((n_views, coarse_res, coarse_res), 2.5, np.float32),
        fine_images=rng.random((n_views, 3, fine_res, fine_res)).astype(np.float32),
        fine_normals=rng.random((n_views, 3, fine_res, fine_res)).astype(np.float32),
        fine_global_maps=rng.random((n_views, 3, fine_res, fine_res)).astype(np.float32),
        fine_masks=np.ones((n_views, fine_res, fine_res), np.float32),
        fine_depths=np.full((n_views, fine_res, fine_res), 2.5, np.float32),
        center_depths=np.array([cam.project(c, (0, 0.9, 0))[1] for c in cams]),
    )
    transform = cam.ProxySpaceTransform(0.55, np.array([0.5, 0.4, 0.5]) * 0.4)
    gt = geo.icosphere(0.3, 2, center=(0.5, 0.5, 0.5))
    return pl.SceneSample(scene="synthetic", person=0, body=body,
                          pose=None, transform=transform, gt_mesh_proxy=gt,
                          volume=rng.random((volume_res,) * 3),
                          views=views,
                          points=rng.random((512, 3)),
                          labels=rng.integers(0, 2, 512).astype(np.float64))


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("scenes") / "single_000"
    cfg = sg.GenConfig(seed=11, n_views=3, fine_res=128, coarse_res=64,
                       body_grid=56, gt_grid=72, points_per_person=6000)
    sg.generate_scene("single", 1234, path, cfg)
    return path


class TestVariantPresets:
    def test_modes(self):
        c = pl.variant_config("pifu_mv_mean")
        assert not c.use_proxy and not c.use_fine and c.fusion_mode == "mean"
        assert c.effective_depth == 0
        c = pl.variant_config("pifuhd_mv_att")
        assert c.use_fine and not c.use_proxy and c.effective_depth > 0
        c = pl.variant_config("ours")
        assert c.use_proxy and c.use_global_maps and c.use_fine
        c = pl.variant_config("ours_no_sn")
        assert c.use_proxy and not c.use_global_maps

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="unknown variant"):
            pl.variant_config("nope")


class TestSampleTrainingPoints:
    def test_sphere_volume_rate(self):
        rng = np.random.default_rng(0)
        gt = geo.icosphere(0.3, 3, center=(0.5, 0.5, 0.5))
        pts, labels = pl.sample_training_points(gt, 20000, 0.0, 0.05, rng)
        expected = 4 / 3 * np.pi * 0.3 ** 3
        assert labels.mean() == pytest.approx(expected, rel=0.05)

    def test_near_surface_split(self):
        rng = np.random.default_rng(1)
        gt = geo.icosphere(0.3, 3, center=(0.5, 0.5, 0.5))
        pts, labels = pl.sample_training_points(gt, 4000, 1.0, 1e-4, rng)
        assert labels.mean() == pytest.approx(0.5, abs=0.05)

    def test_clamped_to_cube(self):
        rng = np.random.default_rng(2)
        gt = geo.icosphere(0.45, 2, center=(0.5, 0.5, 0.5))
        pts, _ = pl.sample_training_points(gt, 3000, 0.9, 0.3, rng)
        assert pts.min() >= 0.0 and pts.max() <= 1.0


class TestCoarseQuery:
    def test_untrained_sigmoid_range(self):
        rng = np.random.default_rng(0)
        sample = synthetic_sample(rng)
        net = pl.CoarseNet(tiny_config(coarse_res=32, fine_res=32, volume_res=8))
        s, omega = net.query(sample, sample.points[:64])
        assert np.isfinite(s).all()
        assert (s > 0).all() and (s < 1).all()
        assert omega.shape == (64, 16)

    def test_duplicated_views_match_single(self):
        rng = np.random.default_rng(1)
        sample1 = synthetic_sample(rng, n_views=1)
        v = sample1.views
        dup = pl.PersonViews(
            cameras=v.cameras * 2,
            coarse_images=np.repeat(v.coarse_images, 2, axis=0),
            coarse_masks=np.repeat(v.coarse_masks, 2, axis=0),
            coarse_depths=np.repeat(v.coarse_depths, 2, axis=0),
            fine_images=np.repeat(v.fine_images, 2, axis=0),
            fine_normals=np.repeat(v.fine_normals, 2, axis=0),
            fine_global_maps=np.repeat(v.fine_global_maps, 2, axis=0),
            fine_masks=np.repeat(v.fine_masks, 2, axis=0),
            fine_depths=np.repeat(v.fine_depths, 2, axis=0),
            center_depths=np.repeat(v.center_depths, 2),
        )
        sample2 = pl.SceneSample(**{**sample1.__dict__, "views": dup})
        net = pl.CoarseNet(tiny_config(coarse_res=32, fine_res=32, volume_res=8))
        s1, _ = net.query(sample1, sample1.points[:32])
        s2, _ = net.query(sample2, sample1.points[:32])
        npt.assert_allclose(s1, s2, atol=1e-5)

    def test_out_of_cube_clamped_with_counter(self):
        rng = np.random.default_rng(2)
        sample = synthetic_sample(rng)
        net = pl.CoarseNet(tiny_config(coarse_res=32, fine_res=32, volume_res=8))
        pts = np.array([[0.5, 0.5, 0.5], [1.4, 0.5, 0.5], [-0.2, 2.0, 0.5]])
        net.query(sample, pts)
        assert net.clamp_warnings == 2

    def test_full_chain_gradients(self):
        """Finite differences through projection, sampling, convs, fusion,
        and the MLP, against the hand-written backward chain.

        Runs in float64: a seven-layer composition drowns a finite-difference
        probe in float32 round-off, so the chain is verified above that
        noise floor (per-op float32 checks live in test_neural).
        """
        nn.set_default_dtype(np.float64)
        try:
            rng = np.random.default_rng(3)
            sample = synthetic_sample(rng, n_views=2, coarse_res=16, fine_res=16,
                                      volume_res=6)
            cfg = tiny_config(coarse_res=16, fine_res=16, volume_res=6,
                              c_coarse=4, c_volume=3, d_k=8, n_head=2,
                              encoder_depth=1, d_ff=12, mlp_hidden=12, omega_dim=6)
            net = pl.CoarseNet(cfg, rng=np.random.default_rng(5))
            pts = sample.points[:12]
            w = rng.normal(size=12)

            def loss():
                s, _ = net.query(sample, pts)
                return float(np.sum(s.astype(np.float64) * w))

            net.store.zero_grads()
            s, _ = net.query(sample, pts)
            net.backward(w)
            eps = 1e-6
            for name in ("coarse.img.conv0.W", "coarse.img.conv2.b",
                         "coarse.vol.conv1.W", "coarse.embed.W",
                         "coarse.enc.layer0.attn.Wq", "coarse.mlp.l1.W",
                         "coarse.mlp.head.W"):
                num = nn.numerical_grad(loss, net.store.params[name], eps)
                err = nn.relative_grad_error(net.store.grads[name], num)
                assert err < 1e-4, f"{name}: {err}"
        finally:
            nn.set_default_dtype(np.float32)


class TestFineQuery:
    def test_zeroed_head_gives_half(self):
        rng = np.random.default_rng(4)
        sample = synthetic_sample(rng, coarse_res=32, fine_res=32)
        cfg = tiny_config(coarse_res=32, fine_res=32, volume_res=8)
        fine = pl.FineNet(cfg)
        fine.store.params["fine.mlp.head.W"][...] = 0.0
        fine.store.params["fine.mlp.head.b"][...] = 0.0
        omega = rng.random((16, cfg.omega_dim)).astype(np.float32)
        s = fine.query(sample, sample.points[:16], omega)
        npt.assert_allclose(s, np.full(16, 0.5), atol=1e-7)

    def test_global_map_channel_wired(self):
        rng = np.random.default_rng(5)
        sample = synthetic_sample(rng, coarse_res=32, fine_res=32)
        cfg_on = tiny_config(coarse_res=32, fine_res=32, volume_res=8,
                             use_global_maps=True)
        cfg_off = tiny_config(coarse_res=32, fine_res=32, volume_res=8,
                              use_global_maps=False)
        omega = rng.random((16, cfg_on.omega_dim)).astype(np.float32)
        s_on = pl.FineNet(cfg_on, rng=np.random.default_rng(9)).query(
            sample, sample.points[:16], omega)
        s_off = pl.FineNet(cfg_off, rng=np.random.default_rng(9)).query(
            sample, sample.points[:16], omega)
        assert np.abs(s_on - s_off).max() > 1e-6

    def test_full_chain_gradients(self):
        # float64 for the same reason as the coarse-chain check
        nn.set_default_dtype(np.float64)
        try:
            rng = np.random.default_rng(6)
            sample = synthetic_sample(rng, n_views=2, coarse_res=16, fine_res=16)
            cfg = tiny_config(coarse_res=16, fine_res=16, volume_res=6,
                              c_fine=4, d_k=8, n_head=2, encoder_depth=1,
                              d_ff=12, mlp_hidden=12, omega_dim=6)
            fine = pl.FineNet(cfg, rng=np.random.default_rng(7))
            pts = sample.points[:10]
            omega = rng.random((10, cfg.omega_dim))
            w = rng.normal(size=10)

            def loss():
                return float(np.sum(fine.query(sample, pts, omega).astype(np.float64) * w))

            fine.store.zero_grads()
            fine.query(sample, pts, omega)
            fine.backward(w)
            for name in ("fine.img.conv0.W", "fine.img.conv1.W", "fine.embed.W",
                         "fine.enc.layer0.ff1.W", "fine.mlp.head.W"):
                num = nn.numerical_grad(loss, fine.store.params[name], 1e-6)
                err = nn.relative_grad_error(fine.store.grads[name], num)
                assert err < 1e-4, f"{name}: {err}"
        finally:
            nn.set_default_dtype(np.float32)


class TestHierarchicalEvaluation:
    @staticmethod
    def smooth_sphere_field(pts, r=0.31, w=0.02):
        d = np.linalg.norm(pts - 0.5, axis=1) - r
        return 1.0 / (1.0 + np.exp(d / w))

    def test_matches_dense_exactly(self):
        dense, n_dense = pl.evaluate_field_dense(self.smooth_sphere_field, 64)
        hier, n_hier = pl.evaluate_field_hierarchical(self.smooth_sphere_field, 64)
        m_dense = pl.extract_level_mesh(dense, 0.5)
        m_hier = pl.extract_level_mesh(hier, 0.5)
        npt.assert_array_equal(m_dense.vertices, m_hier.vertices)
        npt.assert_array_equal(m_dense.faces, m_hier.faces)
        assert n_hier < 0.5 * n_dense

    def test_never_culls_straddling_blocks(self):
        # a field with a sharp jump still gets refined wherever coarse
        # corners straddle the level
        def field(pts):
            return (pts[:, 0] < 0.47).astype(np.float64)

        hier, _ = pl.evaluate_field_hierarchical(field, 32, stride=8)
        dense, _ = pl.evaluate_field_dense(field, 32)
        # the jump plane sits inside refined blocks: identical values there
        jump = slice(10, 20)
        npt.assert_array_equal(hier.values[jump], dense.values[jump])

    def test_oracle_field_reconstruction(self):
        gt = geo.icosphere(0.3, 3, center=(0.5, 0.5, 0.5))
        inside = geo.InsideQuery(gt)

        def oracle(pts):
            return inside(pts).astype(np.float64)

        grid, _ = pl.evaluate_field_dense(oracle, 64)
        mesh = pl.extract_level_mesh(grid, 0.5)
        d = ev.chamfer(mesh, gt, n_samples=20000)
        assert d < 2 * grid.spacing

    def test_level_symmetry(self):
        grid, _ = pl.evaluate_field_dense(self.smooth_sphere_field, 32)
        m1 = pl.extract_level_mesh(grid, 0.5)
        flipped = geo.ScalarGrid(grid.dims, grid.origin, grid.spacing,
                                 1.0 - grid.values)
        m2 = pl.extract_level_mesh(flipped, 0.5)
        npt.assert_allclose(m1.vertices, m2.vertices, atol=1e-12)
        npt.assert_array_equal(np.sort(m1.faces, axis=1), np.sort(m2.faces, axis=1))
        assert not np.array_equal(m1.faces, m2.faces)


class TestTraining:
    def test_first_loss_near_ln2_and_determinism(self, scene_dir, tmp_path):
        samples = sg.load_scene(scene_dir)
        cfg = tiny_config(points_per_step=128, seed=3)

        r1 = pl.train(cfg, samples, tmp_path / "run1", steps_coarse=8,
                      steps_fine=2)
        r2 = pl.train(cfg, samples, tmp_path / "run2", steps_coarse=8,
                      steps_fine=2)
        assert abs(r1.coarse_losses[0] - np.log(2)) < 0.2
        npt.assert_array_equal(r1.coarse_losses, r2.coarse_losses)
        npt.assert_array_equal(r1.fine_losses, r2.fine_losses)
        ckpt1 = (tmp_path / "run1" / "coarse.ckpt").read_bytes()
        ckpt2 = (tmp_path / "run2" / "coarse.ckpt").read_bytes()
        assert ckpt1 == ckpt2

    def test_short_overfit_reduces_loss(self, scene_dir, tmp_path):
        samples = sg.load_scene(scene_dir)
        cfg = tiny_config(points_per_step=384, lr=3e-3, seed=1)
        result = pl.train(cfg, samples, tmp_path / "overfit",
                          steps_coarse=300, steps_fine=0)
        start = float(np.mean(result.coarse_losses[:10]))
        end = float(np.mean(result.coarse_losses[-10:]))
        assert end < 0.5 * start

        # held-out points of the same scene: the field must track labels
        coarse = pl.CoarseNet(cfg, rng=np.random.default_rng(cfg.seed + 101))
        coarse.store.load(tmp_path / "overfit" / "coarse.ckpt")
        rng = np.random.default_rng(99)
        pts, labels = pl.sample_training_points(samples[0].gt_mesh_proxy, 2000,
                                                cfg.near_fraction,
                                                cfg.sigma_near, rng)
        s, _ = coarse.query(samples[0], pts)
        assert np.mean(np.abs(s - labels)) < 0.35

    def test_divergence_aborts_with_checkpoint(self, scene_dir, tmp_path,
                                               monkeypatch):
        samples = sg.load_scene(scene_dir)
        cfg = tiny_config(seed=2)
        calls = {"n": 0}
        real = pl.bce_loss

        def exploding(pred, target):
            calls["n"] += 1
            if calls["n"] >= 4:
                return float("nan"), np.zeros_like(pred)
            return real(pred, target)

        monkeypatch.setattr(pl, "bce_loss", exploding)
        with pytest.raises(pl.TrainingDiverged):
            pl.train(cfg, samples, tmp_path / "diverge", steps_coarse=10,
                     steps_fine=0)
        assert (tmp_path / "diverge" / "coarse.ckpt").exists()


class TestReconstruct:
    def test_coarse_only_roundtrip(self, scene_dir, tmp_path):
        samples = sg.load_scene(scene_dir)
        cfg = tiny_config(use_fine=False, points_per_step=384, lr=3e-3, seed=5)
        pl.train(cfg, samples, tmp_path / "t", steps_coarse=400, steps_fine=0)
        coarse, fine = pl.load_nets(cfg, tmp_path / "t")
        assert fine is None
        recs = pl.reconstruct(coarse, None, samples, grid_dims=48)
        assert len(recs) == 1
        mesh = recs[0].mesh_world
        assert not mesh.is_empty()
        gt = geo.load_obj(scene_dir / "p0_gt.obj")
        d = ev.chamfer(mesh, gt, n_samples=10000)
        # an undertrained coarse field still lands in the right region
        assert d < 0.25
