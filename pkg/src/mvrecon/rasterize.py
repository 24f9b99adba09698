"""Software rasterization: normal maps, depth, masks, occlusion compositing.

Edge-function triangle fill with a per-pixel z-test. No antialiasing and no
lighting model; rendering is deterministic (triangles processed in face
order, equal depth keeps the earlier triangle). Triangles are treated as
two-sided so interpolated attributes, not facing, decide pixel values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .camera import Camera, project_points
from .geometry import TriangleMesh

SHADING_MODES = ("posed_normal", "canonical_normal", "depth", "mask")


@dataclass
class Image:
    """Float32 raster, values (height, width, channels)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        if self.values.ndim != 3 or not 1 <= self.values.shape[2] <= 4:
            raise ValueError(f"image must be (H, W, 1..4), got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("image contains NaN/Inf")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def save_simg(image: Image, path) -> None:
    """Lossless float image: "SIMG", u32 width/height/channels, then f32 data
    row-major (y, x, channel), little-endian."""
    with open(path, "wb") as fh:
        fh.write(b"SIMG")
        fh.write(struct.pack("<III", image.width, image.height, image.channels))
        fh.write(image.values.astype("<f4").tobytes())


def load_simg(path) -> Image:
    with open(path, "rb") as fh:
        if fh.read(4) != b"SIMG":
            raise ValueError("not an SIMG file")
        w, h, c = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(4 * w * h * c), dtype="<f4")
    return Image(data.reshape(h, w, c).copy())


def save_png(image: Image, path) -> None:
    """8-bit visualization copy (values clipped to [0,1] and scaled by 255)."""
    from PIL import Image as PILImage

    arr = np.clip(image.values, 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    if data.shape[2] == 1:
        pil = PILImage.fromarray(data[:, :, 0], mode="L")
    elif data.shape[2] == 3:
        pil = PILImage.fromarray(data, mode="RGB")
    elif data.shape[2] == 4:
        pil = PILImage.fromarray(data, mode="RGBA")
    else:
        pil = PILImage.fromarray(data[:, :, 0], mode="L")
    pil.save(path)


def _raster_core(mesh: TriangleMesh, camera: Camera,
                 attrs: np.ndarray | None,
                 chunk_fragments: int = 4_000_000
                 ) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """Z-buffered fill. Returns (depth, interpolated attrs, coverage mask).

    Fully vectorized over candidate fragments (every pixel center inside a
    triangle's screen bounding box). Ties at equal depth go to the lowest
    face index, so the result does not depend on processing order.
    Attributes are perspective-correct (a/z linear in screen space).
    Background depth is 0 with validity carried by the mask.
    """
    H, W = camera.height, camera.width
    depth = np.full(H * W, np.inf)
    winner = np.full(H * W, np.iinfo(np.int64).max, dtype=np.int64)
    cover = np.zeros(H * W, dtype=bool)
    A = 0 if attrs is None else attrs.shape[1]
    out_attrs = np.zeros((H * W, A)) if A else None
    if mesh.is_empty():
        return (np.zeros((H, W)), None if not A else out_attrs.reshape(H, W, A),
                cover.reshape(H, W))

    xy, z = project_points(camera, mesh.vertices, allow_behind=True)
    tri_xy = xy[mesh.faces]                             # (T, 3, 2)
    tri_z = z[mesh.faces]                               # (T, 3)
    # near-plane clipping is out of scope for ring captures: drop whole
    # triangles touching the camera plane
    ok = (tri_z > 1e-9).all(axis=1)
    x0 = np.maximum(np.ceil(tri_xy[:, :, 0].min(axis=1)), 0).astype(np.int64)
    x1 = np.minimum(np.floor(tri_xy[:, :, 0].max(axis=1)), W - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(tri_xy[:, :, 1].min(axis=1)), 0).astype(np.int64)
    y1 = np.minimum(np.floor(tri_xy[:, :, 1].max(axis=1)), H - 1).astype(np.int64)
    area = ((tri_xy[:, 1, 0] - tri_xy[:, 0, 0]) * (tri_xy[:, 2, 1] - tri_xy[:, 0, 1])
            - (tri_xy[:, 2, 0] - tri_xy[:, 0, 0]) * (tri_xy[:, 1, 1] - tri_xy[:, 0, 1]))
    ok &= (x0 <= x1) & (y0 <= y1) & (np.abs(area) > 1e-12)
    tris = np.nonzero(ok)[0]
    if len(tris) == 0:
        return (np.zeros((H, W)), None if not A else out_attrs.reshape(H, W, A),
                cover.reshape(H, W))

    widths = x1[tris] - x0[tris] + 1
    heights = y1[tris] - y0[tris] + 1
    counts = widths * heights
    bounds = np.concatenate([[0], np.cumsum(counts)])
    total = int(bounds[-1])
    inv_z = 1.0 / z

    # chunk groups of triangles so fragment arrays stay bounded
    starts = [0]
    for i in range(len(tris)):
        if bounds[i + 1] - bounds[starts[-1]] > chunk_fragments:
            starts.append(i)
    starts.append(len(tris))

    for si in range(len(starts) - 1):
        lo, hi = starts[si], starts[si + 1]
        sel = tris[lo:hi]
        n_i = counts[lo:hi]
        off = np.concatenate([[0], np.cumsum(n_i)])
        N = int(off[-1])
        if N == 0:
            continue
        local = np.arange(N) - np.repeat(off[:-1], n_i)
        tri_local = np.repeat(np.arange(len(sel)), n_i)
        t_ids = sel[tri_local]
        wds = widths[lo:hi][tri_local]
        ky, kx = np.divmod(local, wds)
        px = x0[t_ids] + kx
        py = y0[t_ids] + ky

        p = tri_xy[t_ids]                                # (N, 3, 2)
        ar = area[t_ids]
        w0 = ((p[:, 1, 0] - px) * (p[:, 2, 1] - py)
              - (p[:, 2, 0] - px) * (p[:, 1, 1] - py)) / ar
        w1 = ((p[:, 2, 0] - px) * (p[:, 0, 1] - py)
              - (p[:, 0, 0] - px) * (p[:, 2, 1] - py)) / ar
        w2 = 1.0 - w0 - w1
        hit = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not hit.any():
            continue
        t_ids = t_ids[hit]
        px, py = px[hit], py[hit]
        w0, w1, w2 = w0[hit], w1[hit], w2[hit]
        izs = inv_z[mesh.faces[t_ids]]                   # (M, 3)
        iz = w0 * izs[:, 0] + w1 * izs[:, 1] + w2 * izs[:, 2]
        zpix = 1.0 / np.maximum(iz, 1e-12)
        pix = py * W + px

        before = depth[pix]
        np.minimum.at(depth, pix, zpix)
        # a strictly improved pixel invalidates any earlier chunk's winner
        improved = depth[pix] < before
        winner[pix[improved]] = np.iinfo(np.int64).max
        at_front = zpix == depth[pix]
        np.minimum.at(winner, pix[at_front], t_ids[at_front])
        final = at_front & (t_ids == winner[pix])
        cover[pix[final]] = True
        if A:
            av = attrs[mesh.faces[t_ids[final]]]         # (K, 3, A)
            num = (w0[final, None] * av[:, 0] * izs[final, 0, None]
                   + w1[final, None] * av[:, 1] * izs[final, 1, None]
                   + w2[final, None] * av[:, 2] * izs[final, 2, None])
            out_attrs[pix[final]] = num / iz[final, None]

    depth_out = np.where(cover, depth, 0.0).reshape(H, W)
    return (depth_out, None if not A else out_attrs.reshape(H, W, A),
            cover.reshape(H, W))


def rasterize(mesh: TriangleMesh, camera: Camera, shading: str,
              attach: np.ndarray | None = None) -> Image:
    """Render one mesh from one camera.

    shading:
      posed_normal      rgb = (n + 1) / 2 from the mesh's vertex normals
      canonical_normal  same encoding, normals supplied via ``attach``
      depth             camera-space meters (background 0, validity = mask)
      mask              coverage in {0, 1}
    """
    if shading not in SHADING_MODES:
        raise ValueError(f"unknown shading {shading!r}, expected one of {SHADING_MODES}")
    if shading == "posed_normal":
        if mesh.vertex_normals is None:
            raise ValueError("posed_normal shading needs vertex normals")
        attrs = mesh.vertex_normals
    elif shading == "canonical_normal":
        if attach is None:
            raise ValueError("canonical_normal shading needs attached normals")
        attach = np.asarray(attach, dtype=np.float64)
        if attach.shape != mesh.vertices.shape:
            raise ValueError("attached normals must be one unit vector per vertex")
        attrs = attach
    else:
        attrs = None

    depth, vals, cover = _raster_core(mesh, camera, attrs)
    if shading == "depth":
        return Image(depth[:, :, None])
    if shading == "mask":
        return Image(cover.astype(np.float32)[:, :, None])
    rgb = np.zeros_like(vals)
    norm = np.linalg.norm(vals, axis=2, keepdims=True)
    safe = np.maximum(norm, 1e-9)
    rgb[cover] = ((vals / safe + 1.0) * 0.5)[cover]
    return Image(rgb)


def render_depth_and_mask(mesh: TriangleMesh, camera: Camera) -> tuple[Image, Image]:
    """One rasterization pass shared by the depth and mask outputs."""
    depth, _, cover = _raster_core(mesh, camera, None)
    return Image(depth[:, :, None]), Image(cover.astype(np.float32)[:, :, None])


def render_headlight(mesh: TriangleMesh, camera: Camera) -> Image:
    """Gray lambertian shading lit from the camera; the synthetic stand-in
    for an RGB appearance image."""
    if mesh.vertex_normals is None:
        raise ValueError("headlight shading needs vertex normals")
    view = mesh.vertices - camera.center()
    view /= np.maximum(np.linalg.norm(view, axis=1, keepdims=True), 1e-12)
    lambert = np.abs(np.einsum("ij,ij->i", mesh.vertex_normals, view))
    depth, vals, cover = _raster_core(mesh, camera, lambert[:, None])
    img = np.zeros((camera.height, camera.width, 3))
    img[cover] = np.clip(vals[cover], 0.0, 1.0)
    return Image(img)


def render_global_normal_map(body, pose, camera: Camera) -> Image:
    """Posed proxy geometry colored by canonical-pose normals.

    The same body part keeps the same color across views and poses, which is
    what makes the map a view-consistent part encoding.
    """
    from .body import pose_body  # local import: body builds on geometry only

    posed = pose_body(body, pose)
    return rasterize(posed, camera, "canonical_normal",
                     attach=body.canonical_mesh.vertex_normals)


def composite_occlusion(target_mask: Image, target_depth: Image,
                        target_image: Image | None,
                        occluders: list[tuple[Image, Image]]) -> tuple[Image, Image | None]:
    """Remove target pixels hidden by occluders that are strictly closer.

    ``occluders`` is a list of (mask, depth) pairs sharing the target's
    camera and resolution. Output mask = target mask minus occluded pixels;
    the image (when given) is zeroed outside the output mask.
    """
    tm = target_mask.values[:, :, 0] > 0.5
    td = target_depth.values[:, :, 0]
    shape = tm.shape
    hidden = np.zeros(shape, dtype=bool)
    for om_img, od_img in occluders:
        om = om_img.values[:, :, 0] > 0.5
        od = od_img.values[:, :, 0]
        if om.shape != shape or od.shape != shape:
            raise ValueError(f"occluder shape {om.shape} != target shape {shape}")
        hidden |= tm & om & (od < td)
    out_mask = tm & ~hidden
    mask_img = Image(out_mask.astype(np.float32)[:, :, None])
    if target_image is None:
        return mask_img, None
    if target_image.values.shape[:2] != shape:
        raise ValueError("image and mask dimensions differ")
    out_img = target_image.values * out_mask[:, :, None]
    return mask_img, Image(out_img)
