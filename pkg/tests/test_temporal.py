import numpy as np
import numpy.testing as npt
import pytest

from mvrecon import body as bd
from mvrecon import evaluate as ev
from mvrecon import geometry as geo
from mvrecon import temporal as tp


@pytest.fixture(scope="module")
def humanoid():
    return bd.build_canonical_body(grid_dims=64)


def single_bone_body(length=0.5, radius=0.12):
    sk = bd.Skeleton(parents=[-1, 0], offsets=[[0, 0, 0], [0, length, 0]],
                     radii=[radius, radius])
    return bd.build_canonical_body(skeleton=sk, grid_dims=40)


def sphere_body(radius=0.45):
    # degenerate single "bone" so every weight lands on it: warps are rigid
    sk = bd.Skeleton(parents=[-1, 0], offsets=[[0, 0, 0], [0, 1e-5, 0]],
                     radii=[radius, radius])
    return bd.build_canonical_body(skeleton=sk, grid_dims=40)


class TestTransferWeights:
    def test_coincident_vertex_small_sigma(self, humanoid):
        pose = bd.PoseParams.rest(humanoid.skeleton.n_joints)
        probe_ids = [10, 200, 1000]
        mesh = geo.TriangleMesh(humanoid.canonical_mesh.vertices[probe_ids],
                                np.array([[0, 1, 2]]))
        window = tp.FusionWindow(sigma=0.002)
        W = tp.transfer_blend_weights(mesh, humanoid, pose, window)
        npt.assert_allclose(W, humanoid.weights[probe_ids], atol=1e-4)

    def test_rows_sum_to_one(self, humanoid):
        pose = bd.PoseParams.rest(humanoid.skeleton.n_joints)
        sphere = geo.icosphere(0.6, 2, center=(0, 0.9, 0))
        W = tp.transfer_blend_weights(sphere, humanoid, pose, tp.FusionWindow())
        assert (W >= -1e-12).all()
        npt.assert_allclose(W.sum(axis=1), 1.0, atol=1e-6)

    def test_k1_copies_nearest(self, humanoid):
        from scipy.spatial import cKDTree
        pose = bd.PoseParams.rest(humanoid.skeleton.n_joints)
        rng = np.random.default_rng(3)
        pts = humanoid.canonical_mesh.vertices[rng.choice(1000, 5)] + 0.01
        mesh = geo.TriangleMesh(pts, np.array([[0, 1, 2], [2, 3, 4]]))
        W = tp.transfer_blend_weights(mesh, humanoid, pose,
                                      tp.FusionWindow(k=1))
        nearest = cKDTree(humanoid.canonical_mesh.vertices).query(pts, k=1)[1]
        npt.assert_array_equal(W, humanoid.weights[nearest])

    def test_empty_mesh_error(self, humanoid):
        empty = geo.TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        pose = bd.PoseParams.rest(humanoid.skeleton.n_joints)
        with pytest.raises(ValueError):
            tp.transfer_blend_weights(empty, humanoid, pose, tp.FusionWindow())


class TestWarpMesh:
    def test_same_pose_identity(self, humanoid):
        J = humanoid.skeleton.n_joints
        aa = np.zeros((J, 3))
        aa[6] = [0, 0, 0.9]
        pose = bd.PoseParams(aa, [0.1, 0, 0])
        recon = bd.pose_body(humanoid, pose)
        frame = tp.FrameRecord(0, recon, humanoid, pose)
        warped = tp.warp_mesh(frame, humanoid, pose)
        err = np.linalg.norm(warped.vertices - recon.vertices, axis=1)
        assert err.max() < 1e-6

    def test_single_bone_rigid_exact(self):
        body = single_bone_body()
        J = body.skeleton.n_joints
        pose_t = bd.PoseParams.rest(J)
        aa = np.zeros((J, 3))
        aa[0] = [0.4, 0.8, -0.3]
        pose_t2 = bd.PoseParams(aa, [0.2, -0.1, 0.3])
        recon = bd.pose_body(body, pose_t)
        frame = tp.FrameRecord(0, recon, body, pose_t)
        warped = tp.warp_mesh(frame, body, pose_t2)
        expected = bd.pose_body(body, pose_t2)
        npt.assert_allclose(warped.vertices, expected.vertices, atol=1e-9)

    def test_warp_roundtrip(self, humanoid):
        J = humanoid.skeleton.n_joints
        aa = np.zeros((J, 3))
        aa[12] = [0.5, 0, 0]
        pose_a = bd.PoseParams.rest(J)
        pose_b = bd.PoseParams(aa, [0.05, 0, 0])
        recon = bd.pose_body(humanoid, pose_a)
        frame = tp.FrameRecord(0, recon, humanoid, pose_a)
        there = tp.warp_mesh(frame, humanoid, pose_b)
        frame_back = tp.FrameRecord(1, there, humanoid, pose_b)
        frame_back.transferred = frame.transferred
        back = tp.warp_mesh(frame_back, humanoid, pose_a)
        err = np.linalg.norm(back.vertices - recon.vertices, axis=1)
        assert err.max() < 1e-4

    def test_articulated_warp_tracks_gt(self, humanoid):
        J = humanoid.skeleton.n_joints
        aa = np.zeros((J, 3))
        aa[6] = [0, 0, 0.5]
        aa[12] = [0.3, 0, 0]
        pose_t = bd.PoseParams.rest(J)
        pose_t2 = bd.PoseParams(aa, np.zeros(3))
        gt_t = bd.pose_body(humanoid, pose_t)
        gt_t2 = bd.pose_body(humanoid, pose_t2)
        # imperfect per-frame "reconstruction": gt remeshed through a grid
        recon_t = geo.marching_cubes(geo.mesh_to_sdf_grid(gt_t, 64, 0.05), 0.0)
        per_frame = ev.chamfer(recon_t, gt_t, n_samples=20000)
        frame = tp.FrameRecord(0, recon_t, humanoid, pose_t)
        warped = tp.warp_mesh(frame, humanoid, pose_t2)
        warped_err = ev.chamfer(warped, gt_t2, n_samples=20000)
        assert warped_err < 2.0 * per_frame


class TestFuseWindow:
    def test_h1_reproduces_frame(self):
        body = sphere_body()
        pose = bd.PoseParams.rest(body.skeleton.n_joints)
        mesh = body.canonical_mesh
        frame = tp.FrameRecord(0, mesh, body, pose)
        fused, grid = tp.fuse_window_with_grid([frame], 0,
                                               tp.FusionWindow(h=1), grid_dims=48)
        d = ev.chamfer(fused, mesh, n_samples=20000)
        assert d < 1.5 * grid.spacing

    def test_static_sequence_exact(self):
        body = sphere_body()
        pose = bd.PoseParams.rest(body.skeleton.n_joints)
        mesh = body.canonical_mesh
        frames = [tp.FrameRecord(t, mesh, body, pose) for t in range(3)]
        fused_static = tp.fuse_window(frames, 1, tp.FusionWindow(h=3), grid_dims=48)
        fused_single = tp.fuse_window([frames[1]], 0, tp.FusionWindow(h=1), grid_dims=48)
        npt.assert_array_equal(fused_static.vertices, fused_single.vertices)
        npt.assert_array_equal(fused_static.faces, fused_single.faces)

    def test_window_shrinks_at_ends(self):
        assert tp.window_frames(5, 0, 3) == [0]
        assert tp.window_frames(5, 1, 3) == [0, 1, 2]
        assert tp.window_frames(5, 4, 5) == [4]
        assert tp.window_frames(5, 2, 5) == [0, 1, 2, 3, 4]

    def test_jittered_sphere_variance_reduction(self):
        body = sphere_body()
        pose = bd.PoseParams.rest(body.skeleton.n_joints)
        base = body.canonical_mesh
        center = base.vertices.mean(axis=0)
        wins = 0
        for seed in range(5):
            rng = np.random.default_rng(seed)
            frames = []
            for t in range(3):
                radial = base.vertices - center
                radial /= np.linalg.norm(radial, axis=1, keepdims=True)
                noise = rng.normal(scale=0.01, size=(len(base.vertices), 1))
                jittered = geo.TriangleMesh(base.vertices + radial * noise,
                                            base.faces)
                frames.append(tp.FrameRecord(t, jittered, body, pose))

            def radial_var(mesh):
                r = np.linalg.norm(mesh.vertices - center, axis=1)
                return float(np.var(r))

            fused = tp.fuse_window(frames, 1, tp.FusionWindow(h=3), grid_dims=40)
            per_frame = tp.fuse_window(frames, 1, tp.FusionWindow(h=1), grid_dims=40)
            if radial_var(fused) < radial_var(per_frame):
                wins += 1
        assert wins == 5

    def test_mean_linearity(self):
        rng = np.random.default_rng(0)
        fields = [rng.normal(size=(6, 6, 6)) for _ in range(3)]
        mean1 = tp._shift_reference_mean(fields)
        mean2 = tp._shift_reference_mean([2.0 * f for f in fields])
        npt.assert_allclose(mean2, 2.0 * mean1, atol=1e-12)
        npt.assert_allclose(mean1, np.mean(fields, axis=0), atol=1e-12)

    def test_fused_within_window_bounds(self):
        body = sphere_body()
        pose = bd.PoseParams.rest(body.skeleton.n_joints)
        rng = np.random.default_rng(7)
        frames = []
        base = body.canonical_mesh
        for t in range(3):
            offset = rng.normal(scale=0.01, size=3)
            frames.append(tp.FrameRecord(t, base.translated(offset), body, pose))
        _, grid = tp.fuse_window_with_grid(frames, 1, tp.FusionWindow(h=3),
                                           grid_dims=32)
        # recompute the per-frame fields on the same grid to bound the mean
        warped = [tp.warp_mesh(frames[i], body, pose) if i != 1 else frames[1].mesh
                  for i in range(3)]
        fields = [geo.mesh_to_sdf_grid(m, grid.dims, 0.0, origin=grid.origin,
                                       spacing=grid.spacing).values for m in warped]
        stack = np.stack(fields)
        assert (grid.values >= stack.min(axis=0) - 1e-9).all()
        assert (grid.values <= stack.max(axis=0) + 1e-9).all()


class TestSequenceIO:
    def test_manifest_roundtrip(self, tmp_path, humanoid):
        J = humanoid.skeleton.n_joints
        entries = []
        for t in range(2):
            aa = np.zeros((J, 3))
            aa[6] = [0, 0, 0.2 * t]
            pose = bd.PoseParams(aa, np.zeros(3))
            mesh = bd.pose_body(humanoid, pose)
            geo.save_obj(mesh, tmp_path / f"frame{t}.obj")
            bd.save_body(humanoid, pose, tmp_path / f"body{t}.json")
            entries.append({"mesh": f"frame{t}.obj", "body": f"body{t}.json"})
        tp.save_sequence_manifest(entries, tmp_path / "sequence.json")
        frames = tp.load_sequence(tmp_path / "sequence.json")
        assert len(frames) == 2
        assert frames[1].t == 1
        npt.assert_allclose(frames[1].pose.axis_angles[6], [0, 0, 0.2], atol=1e-12)
