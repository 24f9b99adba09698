"""Synthetic multi-person scene generation across five occlusion categories.

A scene samples body shapes and poses, places one to three people (plus a
prop for the occluded-single category), renders every person's views with
occlusion compositing against the others, and writes ground-truth meshes,
proxy bodies, float images, occupancy volumes, and labeled training points.

Ground truth differs from the proxy on purpose: the ground-truth surface is
the capsule union with perturbed radii, extra attached blobs, and a smooth
displacement field, while the proxy keeps the clean canonical radii, the way
a fitted parametric model approximates a clothed person.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import body as bd
from . import geometry as geo
from .camera import (Camera, ProxySpaceTransform, camera_ring,
                     fit_proxy_transform, load_cameras, project,
                     save_cameras)
from .pipeline import PersonViews, SceneSample, sample_training_points
from .rasterize import (Image, load_simg, rasterize, render_depth_and_mask,
                        render_global_normal_map, render_headlight, save_png,
                        save_simg)

CATEGORY_NAMES = ("single", "occluded_single", "two_natural", "two_close", "three")


@dataclass
class GenConfig:
    seed: int = 0
    n_views: int = 6
    fine_res: int = 512
    coarse_res: int = 128
    volume_res: int = 32
    body_grid: int = 96          # canonical proxy meshing resolution
    gt_grid: int = 128           # ground-truth meshing resolution
    points_per_person: int = 24000
    near_fraction: float = 0.875
    sigma_near: float = 0.05
    proxy_margin: float = 0.05
    ring_radius: float = 2.6
    ring_height: float = 1.0
    focal: float = 550.0
    scenes_per_category: dict = field(default_factory=lambda: {c: 1 for c in CATEGORY_NAMES})
    min_close_occlusion: float = 0.25
    max_interpenetration: float = 0.12
    write_previews: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# sampling bodies, ground truth, and poses


def random_shape(rng: np.random.Generator, n_joints: int = 17) -> bd.ShapeParams:
    overall = rng.uniform(0.92, 1.08)
    lengths = np.clip(overall * rng.normal(1.0, 0.04, n_joints), 0.85, 1.2)
    radii = np.clip(rng.normal(1.0, 0.07, n_joints), 0.8, 1.25)
    return bd.ShapeParams(lengths, radii)


def random_pose(rng: np.random.Generator, n_joints: int = 17,
                sigma: float = 0.3, clamp: float = 1.2) -> np.ndarray:
    aa = rng.normal(scale=sigma, size=(n_joints, 3))
    mags = np.linalg.norm(aa, axis=1, keepdims=True)
    aa = np.where(mags > clamp, aa * clamp / mags, aa)
    aa[0] = 0.0  # root orientation is assigned by placement
    return aa


# curated interaction templates for the closely-interacting category
def _template_pose(name: str, n_joints: int, rng: np.random.Generator) -> np.ndarray:
    aa = np.zeros((n_joints, 3))
    jitter = rng.normal(scale=0.06, size=(n_joints, 3))
    if name == "hug":
        aa[5] = [0, -1.15, 0]   # arms wrap forward
        aa[8] = [0, 1.15, 0]
        aa[6] = [0, -0.5, 0]
        aa[9] = [0, 0.5, 0]
    elif name == "handshake":
        aa[8] = [0, 1.0, 0]     # right arm forward
        aa[9] = [0, 0.35, 0]
    elif name == "back_to_back":
        aa[5] = [0, 0, -0.35]   # arms slightly down
        aa[8] = [0, 0, 0.35]
    else:
        raise ValueError(f"unknown template {name!r}")
    out = aa + jitter
    out[0] = 0.0
    return out


def clothed_ground_truth(skeleton: bd.Skeleton, rng: np.random.Generator,
                         grid_dims: int) -> geo.TriangleMesh:
    """Canonical ground-truth surface: perturbed capsule radii, a few extra
    blobs, and a low-frequency displacement of the distance field."""
    radii = skeleton.radii * np.clip(rng.normal(1.05, 0.05, len(skeleton.radii)),
                                     0.9, 1.25)
    bumpy = bd.Skeleton(skeleton.parents.copy(), skeleton.offsets.copy(), radii)
    rest = bumpy.rest_joints()
    seg_a, seg_b = rest[bumpy.parents[bumpy.bone_children()]], rest[bumpy.bone_children()]

    n_blobs = int(rng.integers(2, 5))
    bone_ids = rng.integers(0, len(seg_a), size=n_blobs)
    ts = rng.uniform(0.2, 0.8, size=n_blobs)
    centers = seg_a[bone_ids] + ts[:, None] * (seg_b[bone_ids] - seg_a[bone_ids])
    blob_r = rng.uniform(0.05, 0.1, size=n_blobs)

    amp = rng.uniform(0.006, 0.012)
    freq = rng.uniform(22.0, 34.0)
    phase = rng.uniform(0, 2 * np.pi, size=3)

    pad = radii.max() + 0.12
    lo = rest.min(axis=0) - pad
    hi = rest.max(axis=0) + pad
    dims = (grid_dims,) * 3
    spacing = float(np.max((hi - lo) / grid_dims))
    origin = 0.5 * (lo + hi) - 0.5 * spacing * np.asarray(dims)
    grid = geo.ScalarGrid(dims, origin, spacing, np.zeros(dims))
    xs = [grid.cell_centers_1d(a) for a in range(3)]
    X, Y, Z = np.meshgrid(*xs, indexing="ij")
    pts = np.stack([X, Y, Z], -1).reshape(-1, 3)

    d = bd.capsule_field(bumpy, pts)
    for c, r in zip(centers, blob_r):
        db = np.linalg.norm(pts - c, axis=1) - r
        k = bd.SMOOTH_UNION_K
        both = np.stack([d, db])
        d = -k * np.log(np.exp(-both / k).sum(axis=0))
    ripple = (np.sin(freq * pts[:, 0] + phase[0])
              * np.sin(freq * pts[:, 1] + phase[1])
              * np.sin(freq * pts[:, 2] + phase[2]))
    d = d - amp * ripple
    grid.values = d.reshape(dims)
    mesh = geo.marching_cubes(grid, 0.0)
    # keep only the largest connected component: ripple can pinch off crumbs
    mesh = _largest_component(mesh)
    return geo.compute_vertex_normals(mesh)


def _largest_component(mesh: geo.TriangleMesh) -> geo.TriangleMesh:
    parent = np.arange(mesh.n_vertices)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    for a, b, c in mesh.faces:
        ra, rb, rc = find(a), find(b), find(c)
        parent[rb] = ra
        parent[find(rc)] = ra
    roots = np.array([find(v) for v in range(mesh.n_vertices)])
    best = np.bincount(roots).argmax()
    keep = roots == best
    remap = -np.ones(mesh.n_vertices, dtype=np.int64)
    remap[keep] = np.arange(keep.sum())
    faces = mesh.faces[keep[mesh.faces].all(axis=1)]
    return geo.TriangleMesh(mesh.vertices[keep], remap[faces])


@dataclass
class PlacedPerson:
    body: bd.SkinnedBody
    pose: bd.PoseParams
    gt_canonical: geo.TriangleMesh
    gt_posed: geo.TriangleMesh          # world space, with normals
    proxy_posed: geo.TriangleMesh


def _pose_person(body: bd.SkinnedBody, gt_canonical: geo.TriangleMesh,
                 aa: np.ndarray, facing: float,
                 position: np.ndarray) -> PlacedPerson:
    aa = aa.copy()
    aa[0] = [0.0, facing, 0.0]
    pose = bd.PoseParams(aa, position)
    G = bd.skinning_transforms(body.skeleton, pose)
    gt_weights = bd.compute_skinning_weights(gt_canonical.vertices, body.skeleton)
    gt_posed = geo.TriangleMesh(bd.pose_vertices(gt_canonical.vertices,
                                                 gt_weights, G),
                                gt_canonical.faces.copy())
    gt_posed = geo.compute_vertex_normals(gt_posed)
    proxy_posed = bd.pose_body(body, pose)
    return PlacedPerson(body, pose, gt_canonical, gt_posed, proxy_posed)


def _interpenetration(a: geo.TriangleMesh, b: geo.TriangleMesh,
                      rng: np.random.Generator, n: int = 1500) -> float:
    from .evaluate import sample_surface_points

    pts = sample_surface_points(a, n, rng)
    return float(geo.points_inside_fast(b, pts).mean())


def _prop_mesh(rng: np.random.Generator, scene_center: np.ndarray,
               ring_radius: float) -> geo.TriangleMesh:
    """Vertical capsule column placed between the subject and one camera."""
    az = rng.uniform(0, 2 * np.pi)
    dist = rng.uniform(0.8, 1.2)
    height = rng.uniform(1.3, 1.8)
    radius = rng.uniform(0.12, 0.2)
    base = np.array([scene_center[0] + dist * np.cos(az), 0.0,
                     scene_center[2] + dist * np.sin(az)])
    sk = bd.Skeleton(parents=[-1, 0],
                     offsets=[[base[0], radius, base[2]], [0, height, 0]],
                     radii=[radius, radius])
    prop = bd.build_canonical_body(skeleton=sk, grid_dims=48)
    return prop.canonical_mesh


# ---------------------------------------------------------------------------
# scene assembly


def build_scene_people(category: str, rng: np.random.Generator,
                       config: GenConfig) -> tuple[list[PlacedPerson], list[geo.TriangleMesh]]:
    """Sample, pose, and place the people of one scene; returns the people
    and any non-person occluder props."""
    n_joints = 17

    def person(aa, facing, position):
        shape = random_shape(rng, n_joints)
        skeleton = bd.default_skeleton(shape)
        body = bd.build_canonical_body(skeleton=skeleton,
                                       grid_dims=config.body_grid)
        gt = clothed_ground_truth(skeleton, rng, config.gt_grid)
        return _pose_person(body, gt, aa, facing, np.asarray(position, dtype=np.float64))

    props: list[geo.TriangleMesh] = []
    for _ in range(24):  # rejection loop
        if category == "single":
            people = [person(random_pose(rng), rng.uniform(-np.pi, np.pi) * 0.99,
                             [0, 0, 0])]
        elif category == "occluded_single":
            people = [person(random_pose(rng), rng.uniform(-np.pi, np.pi) * 0.99,
                             [0, 0, 0])]
            props = [_prop_mesh(rng, np.zeros(3), config.ring_radius)]
        elif category == "two_natural":
            d = rng.uniform(0.55, 0.75)
            people = [
                person(random_pose(rng), rng.uniform(-np.pi, np.pi) * 0.99,
                       [-d, 0, rng.uniform(-0.15, 0.15)]),
                person(random_pose(rng), rng.uniform(-np.pi, np.pi) * 0.99,
                       [d, 0, rng.uniform(-0.15, 0.15)]),
            ]
        elif category == "two_close":
            template = ("hug", "handshake", "back_to_back")[int(rng.integers(3))]
            d = {"hug": rng.uniform(0.42, 0.52),
                 "handshake": rng.uniform(0.55, 0.68),
                 "back_to_back": rng.uniform(0.40, 0.48)}[template]
            if template == "back_to_back":
                f0, f1 = -np.pi / 2, np.pi / 2
            else:
                f0, f1 = np.pi / 2, -np.pi / 2
            people = [
                person(_template_pose(template, n_joints, rng), f0, [-d / 2, 0, 0]),
                person(_template_pose(template, n_joints, rng), f1, [d / 2, 0, 0]),
            ]
        elif category == "three":
            r = rng.uniform(0.55, 0.75)
            people = []
            base = rng.uniform(0, 2 * np.pi)
            for i in range(3):
                az = base + 2 * np.pi * i / 3
                people.append(person(random_pose(rng),
                                     rng.uniform(-np.pi, np.pi) * 0.99,
                                     [r * np.cos(az), 0, r * np.sin(az)]))
        else:
            raise ValueError(f"unknown category {category!r}")

        if len(people) < 2:
            return people, props
        inter = max(_interpenetration(a.gt_posed, b.gt_posed, rng)
                    for i, a in enumerate(people)
                    for b in people[i + 1:])
        if inter <= config.max_interpenetration:
            return people, props
    raise RuntimeError(f"could not place a valid {category} scene "
                       f"(interpenetration stayed above threshold)")


def _raw_views(person: PlacedPerson, cameras: list[Camera], res: int) -> dict:
    """Uncomposited per-view rasters for one person at one resolution."""
    cams = [c.scaled(res / c.height) if c.height != res else c for c in cameras]
    out = {k: [] for k in ("image", "nf", "nvm", "mask", "depth")}
    for cam in cams:
        depth, mask = render_depth_and_mask(person.gt_posed, cam)
        out["image"].append(render_headlight(person.gt_posed, cam).values)
        out["nf"].append(rasterize(person.gt_posed, cam, "posed_normal").values)
        out["nvm"].append(rasterize(
            person.proxy_posed, cam, "canonical_normal",
            attach=person.body.canonical_mesh.vertex_normals).values)
        out["mask"].append(mask.values)
        out["depth"].append(depth.values)
    return out


def _occluder_views(mesh: geo.TriangleMesh, cameras: list[Camera], res: int) -> dict:
    cams = [c.scaled(res / c.height) if c.height != res else c for c in cameras]
    out = {"mask": [], "depth": []}
    for cam in cams:
        depth, mask = render_depth_and_mask(mesh, cam)
        out["mask"].append(mask.values)
        out["depth"].append(depth.values)
    return out


def _composite_views(raw: dict, occluders: list[dict], n_views: int) -> dict:
    """Remove pixels hidden by strictly closer occluders from the observed
    channels (image, N_F); the proxy global map stays complete."""
    out = {k: [] for k in ("image", "nf", "nvm", "mask", "depth", "occlusion")}
    for v in range(n_views):
        mask = raw["mask"][v][:, :, 0] > 0.5
        depth = raw["depth"][v][:, :, 0]
        full_area = float(mask.sum())
        hidden = np.zeros(mask.shape, dtype=bool)
        for occ in occluders:
            om = occ["mask"][v][:, :, 0] > 0.5
            od = occ["depth"][v][:, :, 0]
            hidden |= mask & om & (od < depth)
        visible = mask & ~hidden
        image = raw["image"][v].copy()
        nf = raw["nf"][v].copy()
        image[~visible] = 0.0
        nf[~visible] = 0.0
        out["image"].append(image)
        out["nf"].append(nf)
        out["nvm"].append(raw["nvm"][v])
        out["mask"].append(visible.astype(np.float32)[:, :, None])
        out["depth"].append(raw["depth"][v])
        out["occlusion"].append(0.0 if full_area == 0
                                else float(hidden.sum()) / full_area)
    return out


def generate_scene(category: str, scene_seed: int, out_dir,
                   config: GenConfig) -> dict:
    """Generate and write one scene; returns its manifest record."""
    out_dir = Path(out_dir)
    (out_dir / "views").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(scene_seed)

    people, props = build_scene_people(category, rng, config)
    centroid = np.mean([p.gt_posed.vertices.mean(axis=0) for p in people], axis=0)
    target = np.array([centroid[0], max(centroid[1], 0.8), centroid[2]])
    n_views = 8 if category == "three" else config.n_views
    cameras = camera_ring(n_views, config.ring_radius, config.ring_height,
                          target, fx=config.focal * config.fine_res / 512.0,
                          width=config.fine_res, height_px=config.fine_res)
    save_cameras(cameras, out_dir / "cameras.json")

    raw = {res: [_raw_views(p, cameras, res) for p in people]
           for res in (config.fine_res, config.coarse_res)}
    prop_raw = {res: [_occluder_views(m, cameras, res) for m in props]
                for res in (config.fine_res, config.coarse_res)}

    occl_stats = []
    people_records = []
    for i, person in enumerate(people):
        geo.save_obj(person.gt_posed, out_dir / f"p{i}_gt.obj")
        bd.save_body(person.body, person.pose, out_dir / f"p{i}_body.json")

        def occluders_for(res):
            return ([raw[res][j] for j in range(len(people)) if j != i]
                    + prop_raw[res])

        fine = _composite_views(raw[config.fine_res][i],
                                occluders_for(config.fine_res), n_views)
        coarse = _composite_views(raw[config.coarse_res][i],
                                  occluders_for(config.coarse_res), n_views)
        for v in range(n_views):
            base = out_dir / "views" / f"p{i}_v{v}"
            for res_name, packs in (("f", fine), ("c", coarse)):
                for key in ("image", "nf", "nvm", "mask", "depth"):
                    save_simg(Image(packs[key][v]), f"{base}_{key}_{res_name}.simg")
            if config.write_previews:
                save_png(Image(fine["image"][v]), f"{base}_image.png")
                save_png(Image(fine["nvm"][v]), f"{base}_nvm.png")

        transform = fit_proxy_transform(person.proxy_posed, config.proxy_margin)
        proxy_in_cube = transform.mesh_to_proxy(person.proxy_posed)
        volume = geo.voxelize_occupancy(proxy_in_cube, config.volume_res,
                                        origin=(0, 0, 0),
                                        spacing=1.0 / config.volume_res)
        geo.save_grid(volume, out_dir / f"p{i}_volume.sgrd")

        gt_proxy = transform.mesh_to_proxy(person.gt_posed)
        prng = np.random.default_rng(scene_seed * 1000 + i)
        points, labels = sample_training_points(gt_proxy, config.points_per_person,
                                                config.near_fraction,
                                                config.sigma_near, prng)
        np.save(out_dir / f"p{i}_points.npy", points.astype(np.float32))
        np.save(out_dir / f"p{i}_labels.npy", labels.astype(np.uint8))

        occl_stats.append({"person": i,
                           "per_view": [round(o, 4) for o in fine["occlusion"]],
                           "mean": round(float(np.mean(fine["occlusion"])), 4)})
        people_records.append({
            "body": f"p{i}_body.json",
            "gt_mesh": f"p{i}_gt.obj",
            "volume": f"p{i}_volume.sgrd",
            "points": f"p{i}_points.npy",
            "labels": f"p{i}_labels.npy",
            "proxy_transform": {"scale": transform.scale,
                                "offset": [float(v) for v in transform.offset]},
        })

    record = {
        "category": category,
        "seed": scene_seed,
        "n_views": n_views,
        "fine_res": config.fine_res,
        "coarse_res": config.coarse_res,
        "cameras": "cameras.json",
        "image_dir": "views",
        "people": people_records,
        "occlusion": occl_stats,
    }
    with open(out_dir / "scene.json", "w") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return record


def mean_scene_occlusion(record: dict) -> float:
    return float(np.mean([p["mean"] for p in record["occlusion"]]))


def generate_dataset(config: GenConfig, out_dir) -> dict:
    """All categories, rejection-resampling closely-interacting scenes until
    they reach the configured occlusion level. Returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenes = []
    scene_counter = 0
    for category in CATEGORY_NAMES:
        count = config.scenes_per_category.get(category, 0)
        for k in range(count):
            name = f"{category}_{k:03d}"
            for attempt in range(16):
                scene_seed = (config.seed * 100003 + scene_counter * 1009
                              + attempt * 7919001)
                record = generate_scene(category, scene_seed, out_dir / name,
                                        config)
                if category != "two_close" or \
                        mean_scene_occlusion(record) >= config.min_close_occlusion:
                    break
            else:
                raise RuntimeError(f"{name}: occlusion target not reached")
            record["name"] = name
            scenes.append(record)
            scene_counter += 1
    manifest = {
        "config": config.to_dict(),
        "seed": config.seed,
        "scenes": [{"name": s["name"], "category": s["category"],
                    "mean_occlusion": mean_scene_occlusion(s)} for s in scenes],
    }
    manifest["content_hashes"] = hash_tree(out_dir)
    with open(out_dir / "dataset.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def hash_tree(root) -> dict[str, str]:
    """Stable sha256 per file, keyed by relative path (manifests excluded)."""
    root = Path(root)
    hashes = {}
    for path in sorted(root.rglob("*")):
        if path.is_file() and path.name != "dataset.json":
            hashes[str(path.relative_to(root))] = \
                hashlib.sha256(path.read_bytes()).hexdigest()
    return hashes


# ---------------------------------------------------------------------------
# loading scenes back into pipeline samples


def load_scene(scene_dir) -> list[SceneSample]:
    scene_dir = Path(scene_dir)
    with open(scene_dir / "scene.json") as fh:
        record = json.load(fh)
    cameras = load_cameras(scene_dir / record["cameras"])
    samples = []
    for i, person in enumerate(record["people"]):
        body, pose = bd.load_body(scene_dir / person["body"])
        gt_world = geo.load_obj(scene_dir / person["gt_mesh"])
        tr = person["proxy_transform"]
        transform = ProxySpaceTransform(tr["scale"], np.array(tr["offset"]))
        volume = geo.load_grid(scene_dir / person["volume"]).values
        points = np.load(scene_dir / person["points"]).astype(np.float64)
        labels = np.load(scene_dir / person["labels"]).astype(np.float64)

        n_views = record["n_views"]
        packs = {}
        for key in ("image", "nf", "nvm", "mask", "depth"):
            for res_name in ("f", "c"):
                arrs = []
                for v in range(n_views):
                    img = load_simg(scene_dir / "views" / f"p{i}_v{v}_{key}_{res_name}.simg")
                    arrs.append(img.values)
                packs[f"{key}_{res_name}"] = np.stack(arrs)

        def chan_first(x):
            return np.ascontiguousarray(x.transpose(0, 3, 1, 2))

        center_world = transform.to_world(np.array([[0.5, 0.5, 0.5]]))[0]
        center_depths = np.array([project(c, center_world)[1] for c in cameras])
        views = PersonViews(
            cameras=cameras,
            coarse_images=chan_first(packs["image_c"]),
            coarse_masks=packs["mask_c"][:, :, :, 0],
            coarse_depths=packs["depth_c"][:, :, :, 0],
            fine_images=chan_first(packs["image_f"]),
            fine_normals=chan_first(packs["nf_f"]),
            fine_global_maps=chan_first(packs["nvm_f"]),
            fine_masks=packs["mask_f"][:, :, :, 0],
            fine_depths=packs["depth_f"][:, :, :, 0],
            center_depths=center_depths,
        )
        samples.append(SceneSample(
            scene=scene_dir.name, person=i, body=body, pose=pose,
            transform=transform,
            gt_mesh_proxy=transform.mesh_to_proxy(gt_world),
            volume=volume, views=views, points=points, labels=labels))
    return samples


def load_dataset(root) -> tuple[dict, dict[str, list[SceneSample]]]:
    root = Path(root)
    with open(root / "dataset.json") as fh:
        manifest = json.load(fh)
    scenes = {}
    for entry in manifest["scenes"]:
        scenes[entry["name"]] = load_scene(root / entry["name"])
    return manifest, scenes
