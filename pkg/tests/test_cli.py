import json
import time

import numpy as np
import pytest

from mvrecon import cli


def run(argv):
    return cli.main(argv)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    """One single-person scene at smoke-test resolutions."""
    out = tmp_path_factory.mktemp("cli") / "data"
    run(["gen-data", "--out", str(out), "--seed", "4", "--views", "3",
         "--fine-res", "128", "--coarse-res", "64", "--scenes", "single=1"])
    return out


class TestGenData:
    def test_manifest_and_layout(self, tiny_dataset):
        manifest = json.loads((tiny_dataset / "dataset.json").read_text())
        assert manifest["scenes"][0]["category"] == "single"
        assert (tiny_dataset / "single_000" / "scene.json").exists()
        assert (tiny_dataset / "single_000" / "cameras.json").exists()
        assert (tiny_dataset / "manifest.json").exists()
        scene = json.loads((tiny_dataset / "single_000" / "scene.json").read_text())
        assert scene["occlusion"][0]["mean"] == 0.0  # single person: no occluders

    def test_deterministic_regeneration(self, tiny_dataset, tmp_path):
        out2 = tmp_path / "data2"
        run(["gen-data", "--out", str(out2), "--seed", "4", "--views", "3",
             "--fine-res", "128", "--coarse-res", "64", "--scenes", "single=1"])
        m1 = json.loads((tiny_dataset / "dataset.json").read_text())
        m2 = json.loads((out2 / "dataset.json").read_text())
        assert m1["content_hashes"] == m2["content_hashes"]

    def test_unknown_category_rejected(self, tmp_path):
        with pytest.raises(SystemExit):
            run(["gen-data", "--out", str(tmp_path / "x"),
                 "--scenes", "quartet=1"])


class TestEndToEndSmoke:
    def test_pipeline_under_five_minutes(self, tiny_dataset, tmp_path):
        t0 = time.time()
        ckpt = tmp_path / "ckpt"
        run(["train", "--data", str(tiny_dataset), "--out", str(ckpt),
             "--variant", "ours", "--steps-coarse", "60", "--steps-fine", "20",
             "--points-per-step", "128", "--d-k", "16", "--encoder-depth", "1",
             "--coarse-res", "64", "--fine-res", "128",
             "--seed", "7", "--quiet"])
        assert (ckpt / "coarse.ckpt").exists()
        assert (ckpt / "fine.ckpt").exists()
        assert (ckpt / "manifest.json").exists()

        meshes = tmp_path / "meshes"
        run(["reconstruct", "--data", str(tiny_dataset),
             "--checkpoints", str(ckpt), "--out", str(meshes),
             "--grid", "48"])
        out = list(meshes.glob("*.obj"))
        assert len(out) == 1
        from mvrecon import geometry as geo
        mesh = geo.load_obj(out[0])
        assert mesh.n_vertices > 0

        report_dir = tmp_path / "report"
        run(["eval", "--data", str(tiny_dataset), "--out", str(report_dir),
             "--checkpoints", f"ours={ckpt}", "missing=/nonexistent",
             "--grid", "32", "--samples", "4000", "--quiet"])
        report = json.loads((report_dir / "report.json").read_text())
        assert "single" in report["cells"]["ours"]
        assert report["cells"]["missing"]["single"] == {}
        assert time.time() - t0 < 300

    def test_single_view_reconstruct(self, tiny_dataset, tmp_path):
        ckpt = tmp_path / "ckpt1v"
        run(["train", "--data", str(tiny_dataset), "--out", str(ckpt),
             "--variant", "pifu_mv_mean", "--steps-coarse", "30",
             "--steps-fine", "0", "--points-per-step", "96",
             "--d-k", "16", "--coarse-res", "64", "--fine-res", "128",
             "--views", "1", "--seed", "3", "--quiet"])
        meshes = tmp_path / "m1v"
        run(["reconstruct", "--data", str(tiny_dataset),
             "--checkpoints", str(ckpt), "--out", str(meshes),
             "--grid", "32", "--views", "1"])
        assert len(list(meshes.glob("*.obj"))) == 1


class TestFuseCommand:
    def test_fuse_sequence(self, tmp_path):
        from mvrecon import body as bd
        from mvrecon import geometry as geo
        from mvrecon import temporal as tp

        body = bd.build_canonical_body(grid_dims=40)
        entries = []
        for t in range(3):
            aa = np.zeros((17, 3))
            aa[6] = [0, 0, 0.15 * t]
            pose = bd.PoseParams(aa, np.zeros(3))
            mesh = bd.pose_body(body, pose)
            geo.save_obj(mesh, tmp_path / f"f{t}.obj")
            bd.save_body(body, pose, tmp_path / f"b{t}.json")
            entries.append({"mesh": f"f{t}.obj", "body": f"b{t}.json"})
        tp.save_sequence_manifest(entries, tmp_path / "seq.json")

        out = tmp_path / "fused"
        run(["fuse", "--sequence", str(tmp_path / "seq.json"),
             "--out", str(out), "--window", "3", "--sigma", "0.05",
             "--k", "4", "--grid", "40"])
        assert len(list(out.glob("fused_*.obj"))) == 3
        assert (out / "manifest.json").exists()


class TestRenderMaps:
    def test_render_maps(self, tmp_path):
        from mvrecon import body as bd
        from mvrecon import camera as cam

        body = bd.build_canonical_body(grid_dims=40)
        pose = bd.PoseParams.rest(17)
        bd.save_body(body, pose, tmp_path / "body.json")
        cam.save_cameras(cam.camera_ring(2, 2.5, 1.0, (0, 0.9, 0)),
                         tmp_path / "cams.json")
        out = tmp_path / "maps"
        run(["render-maps", "--body", str(tmp_path / "body.json"),
             "--cameras", str(tmp_path / "cams.json"), "--out", str(out),
             "--res", "128"])
        assert (out / "v0_global.simg").exists()
        assert (out / "v1_posed.png").exists()


class TestUsageErrors:
    def test_bad_checkpoint_spec(self, tiny_dataset, tmp_path):
        with pytest.raises(SystemExit):
            run(["eval", "--data", str(tiny_dataset),
                 "--out", str(tmp_path / "r"), "--checkpoints", "nodirspec"])

    def test_bad_onoff(self):
        with pytest.raises(SystemExit):
            run(["train", "--data", "x", "--out", "y", "--proxy", "maybe"])
