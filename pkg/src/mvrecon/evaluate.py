"""Chamfer and point-to-surface metrics plus the category benchmark harness.

Metric convention: the harness rescales ground truth (and the reconstruction
with it) to a 1.8 m height before measuring, and reports centimeters, so
numbers are comparable across differently sized bodies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import MeshDistanceQuery, TriangleMesh

CATEGORIES = ("single", "occluded_single", "two_natural", "two_close", "three")


def sample_surface_points(mesh: TriangleMesh, n: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Area-uniform surface samples via cumulative face-area inversion."""
    if mesh.is_empty():
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    cdf = np.cumsum(areas) / total
    face_ids = np.searchsorted(cdf, rng.random(n), side="right").clip(0, len(areas) - 1)
    tri = mesh.triangles()[face_ids]
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    return (tri[:, 0] * (1 - u - v)[:, None] + tri[:, 1] * u[:, None]
            + tri[:, 2] * v[:, None])


def point_to_surface(recon: TriangleMesh, gt: TriangleMesh,
                     n_samples: int = 100_000, seed: int = 0) -> float:
    """Mean exact point-to-triangle distance from area-uniform samples of the
    reconstruction to the ground-truth surface, in mesh units."""
    if recon.is_empty() or gt.is_empty():
        raise ValueError("point_to_surface needs nonempty meshes")
    rng = np.random.default_rng(seed)
    pts = sample_surface_points(recon, n_samples, rng)
    return float(MeshDistanceQuery(gt).distances(pts).mean())


def chamfer(a: TriangleMesh, b: TriangleMesh,
            n_samples: int = 100_000, seed: int = 0) -> float:
    """Symmetric mean of the two directed point-to-surface distances."""
    return 0.5 * (point_to_surface(a, b, n_samples, seed)
                  + point_to_surface(b, a, n_samples, seed))


def normalized_metrics_cm(recon: TriangleMesh, gt: TriangleMesh,
                          n_samples: int = 100_000, seed: int = 0,
                          target_height: float = 1.8) -> dict[str, float]:
    """Chamfer and P2S in centimeters after scaling gt height to 1.8 m.

    The same similarity is applied to both meshes so relative error is
    preserved; only the reporting unit changes.
    """
    lo, gt_hi = gt.bounding_box()
    height = float(gt_hi[1] - lo[1])
    if height <= 0:
        raise ValueError("ground truth has zero height")
    s = target_height / height
    recon_s = recon.transformed(s, (0, 0, 0))
    gt_s = gt.transformed(s, (0, 0, 0))
    return {
        "chamfer": 100.0 * chamfer(recon_s, gt_s, n_samples, seed),
        "p2s": 100.0 * point_to_surface(recon_s, gt_s, n_samples, seed),
    }


@dataclass
class EvalReport:
    """Per-variant, per-category metric table (centimeters)."""

    cells: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)
    per_scene: dict[str, dict[str, list[dict]]] = field(default_factory=dict)

    def add_scene(self, variant: str, category: str, scene: str,
                  metrics: dict[str, float]) -> None:
        rec = {"scene": scene, **metrics}
        self.per_scene.setdefault(variant, {}).setdefault(category, []).append(rec)

    def mark_absent(self, variant: str, category: str) -> None:
        self.cells.setdefault(variant, {})[category] = {}

    def aggregate(self) -> None:
        for variant, cats in self.per_scene.items():
            for category, rows in cats.items():
                self.cells.setdefault(variant, {})[category] = {
                    "chamfer": float(np.mean([r["chamfer"] for r in rows])),
                    "p2s": float(np.mean([r["p2s"] for r in rows])),
                }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"cells": self.cells, "per_scene": self.per_scene},
                      fh, indent=1, sort_keys=True)
            fh.write("\n")

    def format_table(self) -> str:
        variants = sorted(self.cells)
        cats = [c for c in CATEGORIES
                if any(c in self.cells[v] for v in variants)]
        if not cats:  # allow ad-hoc category names
            cats = sorted({c for v in variants for c in self.cells[v]})
        header = f"{'variant':<24}" + "".join(f"{c:>24}" for c in cats)
        sub = f"{'':<24}" + "".join(f"{'chamfer':>12}{'p2s':>12}" for _ in cats)
        lines = [header, sub, "-" * len(sub)]
        for v in variants:
            row = f"{v:<24}"
            for c in cats:
                cell = self.cells[v].get(c)
                if cell:
                    row += f"{cell['chamfer']:>12.3f}{cell['p2s']:>12.3f}"
                else:
                    row += f"{'-':>12}{'-':>12}"
            lines.append(row)
        return "\n".join(lines)


def run_benchmark(data_dir, checkpoints: dict[str, str],
                  grid_dims: int = 64, n_samples: int = 20000,
                  level: float = 0.5, hierarchical: bool = True,
                  out_json=None, verbose: bool = False) -> EvalReport:
    """Evaluate trained variants over every generated scene category.

    ``checkpoints`` maps variant name to a training output directory (holding
    config.json and the coarse/fine checkpoint files). A missing or broken
    checkpoint marks its cells absent and the run continues.
    """
    import json as _json
    from pathlib import Path

    from . import pipeline as pl
    from . import scenegen as sg

    data_dir = Path(data_dir)
    manifest, scenes = sg.load_dataset(data_dir)
    report = EvalReport()
    for variant, ckpt_dir in sorted(checkpoints.items()):
        ckpt_dir = Path(ckpt_dir)
        try:
            with open(ckpt_dir / "config.json") as fh:
                config = pl.PipelineConfig.from_dict(_json.load(fh))
            coarse, fine = pl.load_nets(config, ckpt_dir)
        except (OSError, ValueError) as exc:
            if verbose:
                print(f"[eval] {variant}: missing checkpoint ({exc})")
            for entry in manifest["scenes"]:
                report.mark_absent(variant, entry["category"])
            continue
        for entry in manifest["scenes"]:
            samples = scenes[entry["name"]]
            recs = pl.reconstruct(coarse, fine, samples, grid_dims=grid_dims,
                                  level=level, hierarchical=hierarchical)
            from .geometry import load_obj

            chamfers = []
            p2ss = []
            for sample, rec in zip(samples, recs):
                gt = load_obj(data_dir / entry["name"]
                              / f"p{sample.person}_gt.obj")
                if rec.mesh_world.is_empty():
                    chamfers.append(float("inf"))
                    p2ss.append(float("inf"))
                    continue
                m = normalized_metrics_cm(rec.mesh_world, gt,
                                          n_samples=n_samples)
                chamfers.append(m["chamfer"])
                p2ss.append(m["p2s"])
            report.add_scene(variant, entry["category"], entry["name"],
                             {"chamfer": float(np.mean(chamfers)),
                              "p2s": float(np.mean(p2ss))})
            if verbose:
                print(f"[eval] {variant} {entry['name']}: "
                      f"chamfer {np.mean(chamfers):.3f} cm")
    report.aggregate()
    if out_json is not None:
        report.to_json(out_json)
    return report
