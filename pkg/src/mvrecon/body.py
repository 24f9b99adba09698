"""Articulated capsule body: canonical mesh, skinning weights, forward and
inverse linear blend skinning.

The skeleton is a joint tree; every non-root joint defines the bone from its
parent to itself. Bone b (child joint c) is rigidly attached to joint
parent(c), whose chained transform includes that joint's own rotation, so
rotating a joint swings everything below it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .geometry import (ScalarGrid, TriangleMesh, compute_vertex_normals,
                       load_obj, marching_cubes, save_obj)

SMOOTH_UNION_K = 0.03      # meters; capsule blending width
WEIGHT_SIGMA = 0.06        # meters; skinning weight kernel width
WEIGHT_K = 4               # bones per vertex


@dataclass
class Skeleton:
    parents: np.ndarray      # (J,) int, root = -1
    offsets: np.ndarray      # (J, 3) rest offset from parent (root: absolute)
    radii: np.ndarray        # (J,) bone radius of (parent, j); radii[0] unused

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64).reshape(-1)
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        self.radii = np.asarray(self.radii, dtype=np.float64).reshape(-1)
        J = len(self.parents)
        if self.offsets.shape[0] != J or self.radii.shape[0] != J:
            raise ValueError("parents/offsets/radii lengths differ")
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root")
        if not (self.parents[1:] < np.arange(1, J)).all():
            raise ValueError("parents must precede children (acyclic tree order)")
        if (self.radii[1:] <= 0).any():
            raise ValueError("bone radii must be positive")

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_bones(self) -> int:
        return self.n_joints - 1

    def bone_children(self) -> np.ndarray:
        """Child joint index per bone (bones are numbered 0..J-2)."""
        return np.arange(1, self.n_joints)

    def bone_attach_joints(self) -> np.ndarray:
        """Joint whose chained transform drives each bone."""
        return self.parents[1:]

    def rest_joints(self) -> np.ndarray:
        J = self.n_joints
        joints = np.zeros((J, 3))
        joints[0] = self.offsets[0]
        for j in range(1, J):
            joints[j] = joints[self.parents[j]] + self.offsets[j]
        return joints

    def descendants(self, joint: int) -> np.ndarray:
        """Joint indices in the subtree rooted at ``joint`` (inclusive)."""
        J = self.n_joints
        mask = np.zeros(J, dtype=bool)
        mask[joint] = True
        for j in range(joint + 1, J):
            if mask[self.parents[j]]:
                mask[j] = True
        return np.nonzero(mask)[0]


@dataclass
class PoseParams:
    axis_angles: np.ndarray       # (J, 3) radians
    root_translation: np.ndarray  # (3,) meters

    def __post_init__(self):
        self.axis_angles = np.asarray(self.axis_angles, dtype=np.float64).reshape(-1, 3)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)
        if not np.isfinite(self.axis_angles).all() or not np.isfinite(self.root_translation).all():
            raise ValueError("pose parameters must be finite")
        mags = np.linalg.norm(self.axis_angles, axis=1)
        if (mags >= np.pi).any():
            raise ValueError("per-joint rotation magnitude must stay below pi")

    @classmethod
    def rest(cls, n_joints: int) -> "PoseParams":
        return cls(np.zeros((n_joints, 3)), np.zeros(3))


@dataclass
class ShapeParams:
    """Per-joint multipliers on the default humanoid's bone lengths/radii."""

    length_scale: np.ndarray
    radius_scale: np.ndarray

    def __post_init__(self):
        self.length_scale = np.asarray(self.length_scale, dtype=np.float64).reshape(-1)
        self.radius_scale = np.asarray(self.radius_scale, dtype=np.float64).reshape(-1)
        if (self.length_scale <= 0).any() or (self.radius_scale <= 0).any():
            raise ValueError("shape multipliers must be positive")

    @classmethod
    def default(cls, n_joints: int = 17) -> "ShapeParams":
        return cls(np.ones(n_joints), np.ones(n_joints))


@dataclass
class SkinnedBody:
    skeleton: Skeleton
    canonical_mesh: TriangleMesh      # carries canonical vertex normals
    weights: np.ndarray               # (V, n_bones), rows sum to 1

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        V = self.canonical_mesh.n_vertices
        if self.weights.shape != (V, self.skeleton.n_bones):
            raise ValueError(f"weights must be ({V}, {self.skeleton.n_bones})")
        rows = self.weights.sum(axis=1)
        if (self.weights < -1e-12).any() or np.abs(rows - 1).max() > 1e-6:
            raise ValueError("weights must be nonnegative and sum to 1 per vertex")


# 17-joint default humanoid: pelvis root, two spine links, neck, head, and
# shoulder/elbow/wrist plus hip/knee/ankle per side. T-pose, y up, meters.
_HUMANOID = [
    # name,        parent, offset,                bone radius
    ("pelvis",     -1, (0.00, 0.95, 0.00), 0.10),
    ("spine1",      0, (0.00, 0.12, 0.00), 0.11),
    ("spine2",      1, (0.00, 0.15, 0.00), 0.11),
    ("neck",        2, (0.00, 0.18, 0.00), 0.05),
    ("head",        3, (0.00, 0.15, 0.00), 0.09),
    ("l_shoulder",  2, (0.18, 0.13, 0.00), 0.05),
    ("l_elbow",     5, (0.26, 0.00, 0.00), 0.045),
    ("l_wrist",     6, (0.24, 0.00, 0.00), 0.04),
    ("r_shoulder",  2, (-0.18, 0.13, 0.00), 0.05),
    ("r_elbow",     8, (-0.26, 0.00, 0.00), 0.045),
    ("r_wrist",     9, (-0.24, 0.00, 0.00), 0.04),
    ("l_hip",       0, (0.13, -0.06, 0.00), 0.085),
    ("l_knee",     11, (0.00, -0.42, 0.00), 0.065),
    ("l_ankle",    12, (0.00, -0.40, 0.00), 0.05),
    ("r_hip",       0, (-0.13, -0.06, 0.00), 0.085),
    ("r_knee",     14, (0.00, -0.42, 0.00), 0.065),
    ("r_ankle",    15, (0.00, -0.40, 0.00), 0.05),
]

JOINT_NAMES = [row[0] for row in _HUMANOID]


def default_skeleton(shape: ShapeParams | None = None) -> Skeleton:
    if shape is None:
        shape = ShapeParams.default(len(_HUMANOID))
    parents = np.array([row[1] for row in _HUMANOID])
    offsets = np.array([row[2] for row in _HUMANOID], dtype=np.float64)
    radii = np.array([row[3] for row in _HUMANOID], dtype=np.float64)
    offsets = offsets * shape.length_scale[:, None]
    radii = radii * shape.radius_scale
    return Skeleton(parents, offsets, radii)


def _rodrigues(axis_angles: np.ndarray) -> np.ndarray:
    """Batch axis-angle to rotation matrices, (J, 3) -> (J, 3, 3)."""
    aa = np.asarray(axis_angles, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=1, keepdims=True)
    small = theta[:, 0] < 1e-12
    axis = np.where(small[:, None], 0.0, aa / np.where(theta > 0, theta, 1.0))
    x, y, z = axis[:, 0], axis[:, 1], axis[:, 2]
    zero = np.zeros_like(x)
    K = np.stack([
        np.stack([zero, -z, y], axis=1),
        np.stack([z, zero, -x], axis=1),
        np.stack([-y, x, zero], axis=1),
    ], axis=1)
    th = theta[:, :, None]
    R = np.eye(3)[None] + np.sin(th) * K + (1 - np.cos(th)) * np.einsum("jab,jbc->jac", K, K)
    R[small] = np.eye(3)
    return R


def joint_transforms(skeleton: Skeleton, pose: PoseParams) -> np.ndarray:
    """Chained world transform per joint, (J, 4, 4).

    Joint j's transform maps its rest-local frame (origin at the rest joint)
    to world, including j's own rotation.
    """
    J = skeleton.n_joints
    if pose.axis_angles.shape[0] != J:
        raise ValueError(f"pose has {pose.axis_angles.shape[0]} joints, skeleton has {J}")
    R = _rodrigues(pose.axis_angles)
    rest = skeleton.rest_joints()
    A = np.zeros((J, 4, 4))
    for j in range(J):
        local = np.eye(4)
        local[:3, :3] = R[j]
        if j == 0:
            local[:3, 3] = rest[0] + pose.root_translation
            A[0] = local
        else:
            local[:3, 3] = skeleton.offsets[j]
            A[j] = A[skeleton.parents[j]] @ local
    return A


def skinning_transforms(skeleton: Skeleton, pose: PoseParams) -> np.ndarray:
    """Rest-to-posed rigid transform per bone, (n_bones, 4, 4)."""
    A = joint_transforms(skeleton, pose)
    rest = skeleton.rest_joints()
    attach = skeleton.bone_attach_joints()
    G = A[attach].copy()
    # compose with Trans(-rest_joint) so rest-space points map directly
    shift = np.einsum("bij,bj->bi", G[:, :3, :3], -rest[attach])
    G[:, :3, 3] += shift
    return G


def blend_transforms(weights: np.ndarray, transforms: np.ndarray) -> np.ndarray:
    """Per-vertex convex blend of bone transforms, (V, 4, 4)."""
    return np.einsum("vb,bij->vij", weights, transforms)


def pose_vertices(vertices: np.ndarray, weights: np.ndarray,
                  transforms: np.ndarray) -> np.ndarray:
    M = blend_transforms(weights, transforms)
    return np.einsum("vij,vj->vi", M[:, :3, :3], vertices) + M[:, :3, 3]


def unpose_vertices(vertices: np.ndarray, weights: np.ndarray,
                    transforms: np.ndarray) -> np.ndarray:
    """Inverse blend: recover rest positions from posed ones."""
    M = blend_transforms(weights, transforms)
    det = np.linalg.det(M)
    bad = np.abs(det) < 1e-12
    if bad.any():
        raise ValueError(f"singular blended transform at vertex {int(np.nonzero(bad)[0][0])}")
    Minv = np.linalg.inv(M)
    return np.einsum("vij,vj->vi", Minv[:, :3, :3], vertices) + Minv[:, :3, 3]


def pose_body(body: SkinnedBody, pose: PoseParams) -> TriangleMesh:
    """Canonical mesh deformed by linear blend skinning, normals recomputed."""
    G = skinning_transforms(body.skeleton, pose)
    posed = pose_vertices(body.canonical_mesh.vertices, body.weights, G)
    return compute_vertex_normals(TriangleMesh(posed, body.canonical_mesh.faces.copy()))


def point_segment_distances(points: np.ndarray, seg_a: np.ndarray,
                            seg_b: np.ndarray) -> np.ndarray:
    """Distances from (P, 3) points to (B, 3)-(B, 3) segments, result (P, B)."""
    d = seg_b - seg_a                                   # (B, 3)
    len2 = np.maximum(np.einsum("bj,bj->b", d, d), 1e-18)
    ap = points[:, None, :] - seg_a[None, :, :]         # (P, B, 3)
    t = np.clip(np.einsum("pbj,bj->pb", ap, d) / len2, 0.0, 1.0)
    closest = seg_a[None] + t[:, :, None] * d[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=2)


def _bone_segments(skeleton: Skeleton) -> tuple[np.ndarray, np.ndarray]:
    rest = skeleton.rest_joints()
    children = skeleton.bone_children()
    return rest[skeleton.parents[children]], rest[children]


def capsule_field(skeleton: Skeleton, points: np.ndarray,
                  smooth_k: float = SMOOTH_UNION_K) -> np.ndarray:
    """Smooth-min union of per-bone capsule SDFs (negative inside)."""
    seg_a, seg_b = _bone_segments(skeleton)
    d = point_segment_distances(points, seg_a, seg_b) - skeleton.radii[1:][None, :]
    # exponential smooth min: order-independent and vectorizable
    return -smooth_k * logsumexp(-d / smooth_k, axis=1)


def compute_skinning_weights(vertices: np.ndarray, skeleton: Skeleton,
                             k: int = WEIGHT_K,
                             sigma: float = WEIGHT_SIGMA) -> np.ndarray:
    """Weights over the k nearest bone segments, proportional to
    exp(-d^2 / sigma^2), renormalized per vertex."""
    seg_a, seg_b = _bone_segments(skeleton)
    d = point_segment_distances(np.atleast_2d(vertices), seg_a, seg_b)  # (V, B)
    B = d.shape[1]
    k = min(k, B)
    weights = np.zeros_like(d)
    nearest = np.argpartition(d, k - 1, axis=1)[:, :k]
    rows = np.arange(len(d))[:, None]
    dn = d[rows, nearest]
    # subtract the row min before exponentiating to keep kernels in range
    w = np.exp(-(dn ** 2 - dn.min(axis=1, keepdims=True) ** 2) / sigma ** 2)
    weights[rows, nearest] = w / w.sum(axis=1, keepdims=True)
    return weights


def build_canonical_body(shape: ShapeParams | None = None,
                         grid_dims: int = 96,
                         skeleton: Skeleton | None = None) -> SkinnedBody:
    """Mesh the smooth capsule union in rest pose and attach skinning weights."""
    if skeleton is None:
        skeleton = default_skeleton(shape)
    rest = skeleton.rest_joints()
    pad = skeleton.radii[1:].max() + 4 * SMOOTH_UNION_K
    lo = rest.min(axis=0) - pad
    hi = rest.max(axis=0) + pad
    dims = (grid_dims,) * 3
    spacing = float(np.max((hi - lo) / grid_dims))
    center = 0.5 * (lo + hi)
    origin = center - 0.5 * spacing * np.asarray(dims)
    grid = ScalarGrid(dims, origin, spacing, np.zeros(dims))
    xs = [grid.cell_centers_1d(a) for a in range(3)]
    X, Y, Z = np.meshgrid(*xs, indexing="ij")
    pts = np.stack([X, Y, Z], axis=-1).reshape(-1, 3)
    grid.values = capsule_field(skeleton, pts).reshape(dims)
    mesh = marching_cubes(grid, 0.0)
    if mesh.is_empty():
        raise ValueError("canonical body meshing produced no surface")
    mesh = compute_vertex_normals(mesh)
    weights = compute_skinning_weights(mesh.vertices, skeleton)
    return SkinnedBody(skeleton, mesh, weights)


# ---------------------------------------------------------------------------
# body files: JSON parameters plus the canonical mesh cached as OBJ alongside


def save_body(body: SkinnedBody, pose: PoseParams, path) -> None:
    path = str(path)
    record = {
        "skeleton": {
            "parents": body.skeleton.parents.tolist(),
            "offsets": [[float(v) for v in row] for row in body.skeleton.offsets],
            "radii": [float(v) for v in body.skeleton.radii],
        },
        "pose": {
            "axis_angles": [[float(v) for v in row] for row in pose.axis_angles],
            "root_translation": [float(v) for v in pose.root_translation],
        },
    }
    with open(path, "w") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
        fh.write("\n")
    save_obj(body.canonical_mesh, _canonical_mesh_path(path))


def load_body(path) -> tuple[SkinnedBody, PoseParams]:
    path = str(path)
    with open(path) as fh:
        record = json.load(fh)
    sk = record["skeleton"]
    skeleton = Skeleton(np.array(sk["parents"]), np.array(sk["offsets"]),
                        np.array(sk["radii"]))
    mesh = load_obj(_canonical_mesh_path(path))
    if mesh.vertex_normals is None:
        mesh = compute_vertex_normals(mesh)
    weights = compute_skinning_weights(mesh.vertices, skeleton)
    body = SkinnedBody(skeleton, mesh, weights)
    pose = PoseParams(np.array(record["pose"]["axis_angles"]),
                      np.array(record["pose"]["root_translation"]))
    return body, pose


def _canonical_mesh_path(path: str) -> str:
    stem = path[:-5] if path.endswith(".json") else path
    return stem + "_canonical.obj"
