"""Command-line entry point: gen-data, train, reconstruct, fuse, eval,
render-maps.

Every subcommand validates its inputs, runs the corresponding library stage,
and writes a manifest (config, seed, version, content hashes) next to its
artifacts so a run can be reproduced byte for byte from the same seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__


def _write_manifest(out_dir, command: str, config: dict) -> None:
    from .scenegen import hash_tree

    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "config": config,
        "version": f"mvrecon-{__version__}",
        "content_hashes": {k: v for k, v in hash_tree(out_dir).items()
                           if k != "manifest.json"},
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _parse_category_counts(text: str) -> dict[str, int]:
    from .scenegen import CATEGORY_NAMES

    counts = {c: 0 for c in CATEGORY_NAMES}
    for part in text.split(","):
        if not part:
            continue
        name, _, num = part.partition("=")
        if name not in counts:
            raise SystemExit(f"unknown category {name!r}; "
                             f"choose from {', '.join(CATEGORY_NAMES)}")
        counts[name] = int(num or 1)
    return counts


def _onoff(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def cmd_gen_data(args) -> None:
    from .scenegen import GenConfig, generate_dataset

    config = GenConfig(seed=args.seed, n_views=args.views,
                       fine_res=args.fine_res, coarse_res=args.coarse_res,
                       scenes_per_category=_parse_category_counts(args.scenes),
                       min_close_occlusion=args.min_close_occlusion,
                       write_previews=args.previews)
    manifest = generate_dataset(config, args.out)
    _write_manifest(args.out, "gen-data", config.to_dict())
    for s in manifest["scenes"]:
        print(f"{s['name']:24s} mean occlusion {s['mean_occlusion']:.3f}")
    print(f"dataset written to {args.out}")


def _pipeline_config(args):
    from .pipeline import PipelineConfig, variant_config

    config = variant_config(args.variant) if args.variant else PipelineConfig()
    if args.fusion is not None:
        config.fusion_mode = args.fusion
    if args.proxy is not None:
        config.use_proxy = args.proxy
    if args.global_normal_maps is not None:
        config.use_global_maps = args.global_normal_maps
    if args.seed is not None:
        config.seed = args.seed
    for name in ("coarse_res", "fine_res", "points_per_step", "lr", "d_k",
                 "encoder_depth"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(config, name, value)
    return config


def _load_scenes(data_dir, scene: str | None, views: int | None):
    from .scenegen import load_dataset, load_scene

    data_dir = Path(data_dir)
    if scene is not None:
        groups = {scene: load_scene(data_dir / scene)}
    else:
        _, groups = load_dataset(data_dir)
    if views is not None:
        for samples in groups.values():
            for s in samples:
                v = s.views
                sel = slice(0, views)
                s.views = type(v)(
                    cameras=v.cameras[sel],
                    coarse_images=v.coarse_images[sel],
                    coarse_masks=v.coarse_masks[sel],
                    coarse_depths=v.coarse_depths[sel],
                    fine_images=v.fine_images[sel],
                    fine_normals=v.fine_normals[sel],
                    fine_global_maps=v.fine_global_maps[sel],
                    fine_masks=v.fine_masks[sel],
                    fine_depths=v.fine_depths[sel],
                    center_depths=v.center_depths[sel],
                )
    return groups


def cmd_train(args) -> None:
    from .pipeline import train

    config = _pipeline_config(args)
    groups = _load_scenes(args.data, args.scene, args.views)
    samples = [s for group in groups.values() for s in group]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    result = train(config, samples, out, args.steps_coarse, args.steps_fine,
                   verbose=not args.quiet)
    _write_manifest(out, "train", config.to_dict())
    print(f"final coarse bce {result.coarse_losses[-1]:.4f}"
          + (f", fine bce {result.fine_losses[-1]:.4f}"
             if result.fine_losses else ""))


def cmd_reconstruct(args) -> None:
    from . import geometry as geo
    from .pipeline import PipelineConfig, load_nets, reconstruct

    ckpt_dir = Path(args.checkpoints)
    with open(ckpt_dir / "config.json") as fh:
        config = PipelineConfig.from_dict(json.load(fh))
    coarse, fine = load_nets(config, ckpt_dir)
    groups = _load_scenes(args.data, args.scene, args.views)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, samples in sorted(groups.items()):
        recs = reconstruct(coarse, fine, samples, grid_dims=args.grid,
                           level=args.level, hierarchical=not args.dense)
        for sample, rec in zip(samples, recs):
            path = out / f"{name}_p{sample.person}.obj"
            geo.save_obj(rec.mesh_world, path)
            print(f"{path} ({rec.mesh_world.n_vertices} vertices, "
                  f"{rec.evaluated_points} field evaluations)")
    _write_manifest(out, "reconstruct", {
        "checkpoints": str(ckpt_dir), "grid": args.grid, "level": args.level,
        "views": args.views, "dense": args.dense, "scene": args.scene,
        "config": config.to_dict(),
    })


def cmd_fuse(args) -> None:
    from . import geometry as geo
    from .temporal import FusionWindow, fuse_window, load_sequence

    frames = load_sequence(args.sequence)
    window = FusionWindow(h=args.window, sigma=args.sigma, k=args.k,
                          squared=args.squared)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t in range(len(frames)):
        fused = fuse_window(frames, t, window, grid_dims=args.grid)
        path = out / f"fused_{t:04d}.obj"
        geo.save_obj(fused, path)
        print(f"{path} ({fused.n_vertices} vertices)")
    _write_manifest(out, "fuse", {
        "sequence": str(args.sequence), "window": args.window,
        "sigma": args.sigma, "k": args.k, "squared": args.squared,
        "grid": args.grid,
    })


def cmd_eval(args) -> None:
    from .evaluate import run_benchmark

    checkpoints = {}
    for spec in args.checkpoints:
        name, _, path = spec.partition("=")
        if not path:
            raise SystemExit("--checkpoints expects NAME=DIR entries")
        checkpoints[name] = path
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_benchmark(args.data, checkpoints, grid_dims=args.grid,
                           n_samples=args.samples,
                           hierarchical=not args.dense,
                           out_json=out / "report.json",
                           verbose=not args.quiet)
    print(report.format_table())
    _write_manifest(out, "eval", {
        "data": str(args.data), "checkpoints": checkpoints,
        "grid": args.grid, "samples": args.samples,
    })


def cmd_render_maps(args) -> None:
    from .body import load_body
    from .camera import load_cameras
    from .rasterize import (Image, rasterize, render_global_normal_map,
                            save_png, save_simg)
    from .body import pose_body

    body, pose = load_body(args.body)
    cameras = load_cameras(args.cameras)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    posed = pose_body(body, pose)
    for i, cam in enumerate(cameras):
        if args.res is not None and cam.height != args.res:
            cam = cam.scaled(args.res / cam.height)
        global_map = render_global_normal_map(body, pose, cam)
        posed_map = rasterize(posed, cam, "posed_normal")
        save_simg(global_map, out / f"v{i}_global.simg")
        save_simg(posed_map, out / f"v{i}_posed.simg")
        save_png(global_map, out / f"v{i}_global.png")
        save_png(posed_map, out / f"v{i}_posed.png")
        print(f"view {i}: wrote global + posed normal maps")
    _write_manifest(out, "render-maps", {
        "body": str(args.body), "cameras": str(args.cameras), "res": args.res,
    })


def build_parser() -> argparse.ArgumentParser:
    from .pipeline import VARIANT_PRESETS

    parser = argparse.ArgumentParser(
        prog="mvrecon",
        description="Attention-fused multi-view implicit human reconstruction "
                    "with a body proxy and temporal SDF fusion.")
    parser.add_argument("--version", action="version",
                        version=f"mvrecon {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--views", type=int, default=6)
    g.add_argument("--fine-res", type=int, default=512)
    g.add_argument("--coarse-res", type=int, default=128)
    g.add_argument("--scenes", default="single=1",
                   help="per-category counts, e.g. single=2,two_close=3")
    g.add_argument("--min-close-occlusion", type=float, default=0.25)
    g.add_argument("--previews", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train coarse and fine networks")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--scene", default=None, help="train on one scene only")
    t.add_argument("--variant", choices=sorted(VARIANT_PRESETS), default=None)
    t.add_argument("--fusion", choices=("mean", "att"), default=None)
    t.add_argument("--proxy", type=_onoff, default=None)
    t.add_argument("--global-normal-maps", type=_onoff, default=None)
    t.add_argument("--views", type=int, default=None)
    t.add_argument("--steps-coarse", type=int, default=2000)
    t.add_argument("--steps-fine", type=int, default=1000)
    t.add_argument("--points-per-step", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--d-k", type=int, default=None, dest="d_k")
    t.add_argument("--encoder-depth", type=int, default=None)
    t.add_argument("--coarse-res", type=int, default=None)
    t.add_argument("--fine-res", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reconstruct", help="extract meshes from trained nets")
    r.add_argument("--data", required=True)
    r.add_argument("--checkpoints", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--scene", default=None)
    r.add_argument("--grid", type=int, default=128)
    r.add_argument("--level", type=float, default=0.5)
    r.add_argument("--views", type=int, default=None)
    r.add_argument("--dense", action="store_true",
                   help="disable hierarchical grid culling")
    r.set_defaults(func=cmd_reconstruct)

    f = sub.add_parser("fuse", help="temporal SDF fusion over a sequence")
    f.add_argument("--sequence", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--window", type=int, default=3)
    f.add_argument("--sigma", type=float, default=0.05)
    f.add_argument("--k", type=int, default=4)
    f.add_argument("--squared", action="store_true",
                   help="use exp(-d^2/sigma^2) transfer weights")
    f.add_argument("--grid", type=int, default=128)
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("eval", help="benchmark variants across categories")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--checkpoints", nargs="+", required=True,
                   metavar="NAME=DIR")
    e.add_argument("--grid", type=int, default=64)
    e.add_argument("--samples", type=int, default=20000)
    e.add_argument("--dense", action="store_true")
    e.add_argument("--quiet", action="store_true")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("render-maps", help="render proxy global normal maps")
    m.add_argument("--body", required=True)
    m.add_argument("--cameras", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--res", type=int, default=None)
    m.set_defaults(func=cmd_render_maps)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
