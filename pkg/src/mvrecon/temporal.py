"""Temporal fusion: proxy-guided skinning warps between frames and
sliding-window SDF averaging on a shared grid.

A frame's reconstruction borrows skinning weights from the posed proxy
(kernel-weighted over nearest proxy vertices), is unposed to the canonical
frame with its own pose, and reposed with a neighbor frame's pose. The
window's SDFs are averaged with a shift-by-reference mean so a window of
identical fields reproduces them exactly, bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .body import (PoseParams, SkinnedBody, load_body, pose_vertices,
                   skinning_transforms, unpose_vertices)
from .geometry import (ScalarGrid, TriangleMesh, load_obj, marching_cubes,
                       mesh_to_sdf_grid)


@dataclass
class FusionWindow:
    h: int = 3                 # window size in frames, odd
    sigma: float = 0.05        # meters, weight-transfer kernel width
    k: int = 4                 # proxy vertices per reconstruction vertex
    squared: bool = False      # exp(-d^2/sigma^2) instead of exp(-d/sigma^2)

    def __post_init__(self):
        if self.h < 1 or self.h % 2 == 0:
            raise ValueError("window size must be odd and >= 1")
        if self.sigma <= 0 or self.k < 1:
            raise ValueError("sigma must be positive and k >= 1")


@dataclass
class FrameRecord:
    t: int
    mesh: TriangleMesh              # reconstruction at frame t
    body: SkinnedBody               # proxy with canonical mesh and weights
    pose: PoseParams                # theta_t
    transferred: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mesh.is_empty():
            raise ValueError(f"frame {self.t} has an empty mesh")
        if not np.isfinite(self.pose.axis_angles).all():
            raise ValueError(f"frame {self.t} has a non-finite pose")


def transfer_blend_weights(mesh: TriangleMesh, body: SkinnedBody,
                           pose: PoseParams,
                           window: FusionWindow) -> np.ndarray:
    """Skinning weights for reconstruction vertices, blended from the k
    nearest posed-proxy vertices with kernel exp(-d / sigma^2) (or the
    squared-distance variant), normalized per vertex."""
    if mesh.is_empty():
        raise ValueError("cannot transfer weights onto an empty mesh")
    G = skinning_transforms(body.skeleton, pose)
    proxy_posed = pose_vertices(body.canonical_mesh.vertices, body.weights, G)
    tree = cKDTree(proxy_posed)
    k = min(window.k, len(proxy_posed))
    d, idx = tree.query(mesh.vertices, k=k)
    if k == 1:
        d = d[:, None]
        idx = idx[:, None]
    expo = d ** 2 if window.squared else d
    # shift by the row minimum: ratios are preserved and exp stays in range
    expo = expo - expo.min(axis=1, keepdims=True)
    w = np.exp(-expo / window.sigma ** 2)
    w /= w.sum(axis=1, keepdims=True)
    # convex blend of row-stochastic proxy weight rows stays row-stochastic
    return np.einsum("vk,vkb->vb", w, body.weights[idx])


def warp_mesh(frame: FrameRecord, target_body: SkinnedBody,
              target_pose: PoseParams,
              window: FusionWindow | None = None) -> TriangleMesh:
    """Warp a frame's reconstruction to another frame's pose: unpose with the
    source parameters, repose with the target's, both using the source
    frame's transferred weights."""
    if window is None:
        window = FusionWindow()
    if frame.transferred is None:
        frame.transferred = transfer_blend_weights(frame.mesh, frame.body,
                                                   frame.pose, window)
    W = frame.transferred
    G_src = skinning_transforms(frame.body.skeleton, frame.pose)
    canonical = unpose_vertices(frame.mesh.vertices, W, G_src)
    G_dst = skinning_transforms(target_body.skeleton, target_pose)
    warped = pose_vertices(canonical, W, G_dst)
    return TriangleMesh(warped, frame.mesh.faces.copy())


def _shift_reference_mean(fields: list[np.ndarray]) -> np.ndarray:
    """Mean computed as ref + sum(field - ref)/h: identical inputs reproduce
    the input exactly, general inputs get the ordinary mean."""
    ref = fields[0]
    acc = np.zeros_like(ref)
    for f in fields:
        acc += f - ref
    return ref + acc / len(fields)


def _same_parameters(a: FrameRecord, b: FrameRecord) -> bool:
    return (np.array_equal(a.pose.axis_angles, b.pose.axis_angles)
            and np.array_equal(a.pose.root_translation, b.pose.root_translation)
            and np.array_equal(a.body.skeleton.offsets, b.body.skeleton.offsets)
            and np.array_equal(a.body.skeleton.parents, b.body.skeleton.parents)
            and a.body.canonical_mesh is b.body.canonical_mesh)


def window_frames(n_frames: int, t: int, h: int) -> list[int]:
    """Symmetric window indices; shrinks symmetrically at sequence ends."""
    r = (h - 1) // 2
    r_eff = min(r, t, n_frames - 1 - t)
    return list(range(t - r_eff, t + r_eff + 1))


def fuse_window(frames: list[FrameRecord], t: int, window: FusionWindow,
                grid_dims: int = 128,
                padding_fraction: float = 0.05) -> TriangleMesh:
    """Average the window's warped-frame SDFs on a shared grid and extract
    the zero level set."""
    mesh, _ = fuse_window_with_grid(frames, t, window, grid_dims,
                                    padding_fraction)
    return mesh


def fuse_window_with_grid(frames: list[FrameRecord], t: int,
                          window: FusionWindow, grid_dims: int = 128,
                          padding_fraction: float = 0.05
                          ) -> tuple[TriangleMesh, ScalarGrid]:
    if not 0 <= t < len(frames):
        raise ValueError(f"frame index {t} outside sequence of {len(frames)}")
    target = frames[t]
    idxs = window_frames(len(frames), t, window.h)
    warped = []
    for i in idxs:
        if i == t or _same_parameters(frames[i], target):
            # identical parameters make the warp an exact identity; skipping
            # it keeps static windows bit-for-bit reproducible
            warped.append(frames[i].mesh)
        else:
            warped.append(warp_mesh(frames[i], target.body, target.pose, window))

    los = np.array([m.bounding_box()[0] for m in warped])
    his = np.array([m.bounding_box()[1] for m in warped])
    lo = los.min(axis=0)
    hi = his.max(axis=0)
    extent = hi - lo
    pad = padding_fraction * float(extent.max())
    dims = (grid_dims,) * 3
    spacing = float(np.max((extent + 2 * pad) / grid_dims))
    center = 0.5 * (lo + hi)
    origin = center - 0.5 * spacing * np.asarray(dims)

    fields = [mesh_to_sdf_grid(m, dims, pad, origin=origin, spacing=spacing).values
              for m in warped]
    fused_values = _shift_reference_mean(fields)
    grid = ScalarGrid(dims, origin, spacing, fused_values)
    return marching_cubes(grid, 0.0), grid


# ---------------------------------------------------------------------------
# sequence manifests: ordered [{"mesh": path, "body": path}] per frame


def save_sequence_manifest(entries: list[dict], path) -> None:
    with open(path, "w") as fh:
        json.dump(entries, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_sequence(path) -> list[FrameRecord]:
    path = Path(path)
    with open(path) as fh:
        entries = json.load(fh)
    frames = []
    for t, entry in enumerate(entries):
        mesh = load_obj(path.parent / entry["mesh"])
        body, pose = load_body(path.parent / entry["body"])
        frames.append(FrameRecord(t, mesh, body, pose))
    return frames
