"""Coarse-to-fine pixel-aligned implicit reconstruction.

The coarse level fuses per-view rows of [image feature, normalized depth,
proxy volume feature] into one occupancy prediction plus an embedding; the
fine level fuses high-resolution features of [image, frontal normal map,
proxy global normal map] conditioned on that embedding. Multi-view fusion is
the attention encoder (or mean pooling at depth 0), so every baseline and
ablation is a configuration of the same plumbing.

All query points live in the per-person proxy unit cube; reconstruction maps
results back to world space, and multi-person scenes are unions of
independent per-person reconstructions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .body import PoseParams, SkinnedBody
from .camera import Camera, ProxySpaceTransform, project_points
from .fusion import AttentionEncoder
from .geometry import (ScalarGrid, TriangleMesh, marching_cubes,
                       points_inside_fast)
from .neural import (Adam, BilinearSample, Conv2d, Conv3d, LeakyReLU, Linear,
                     default_dtype,
                     ParamStore, Sigmoid, TrilinearSample, bce_loss, f32)
from .rasterize import rasterize


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint_path):
        super().__init__(f"loss became non-finite at step {step}; "
                         f"last good checkpoint at {checkpoint_path}")
        self.checkpoint_path = checkpoint_path


@dataclass
class PipelineConfig:
    # resolutions
    coarse_res: int = 128
    fine_res: int = 512
    volume_res: int = 32
    # channels
    c_coarse: int = 32
    c_volume: int = 16
    c_fine: int = 32
    # fusion encoder
    d_k: int = 64
    n_head: int = 4
    encoder_depth: int = 2
    d_ff: int = 128
    # implicit MLPs
    mlp_hidden: int = 128
    omega_dim: int = 64
    # variant switches (the three ablation axes plus level selection)
    fusion_mode: str = "att"        # "att" | "mean"
    use_proxy: bool = True
    use_global_maps: bool = True
    use_fine: bool = True
    # training
    lr: float = 1e-3
    points_per_step: int = 1024
    near_fraction: float = 0.875
    sigma_near: float = 0.05
    occlusion_augment_prob: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.fusion_mode not in ("att", "mean"):
            raise ValueError(f"fusion_mode must be att or mean, got {self.fusion_mode!r}")

    @property
    def effective_depth(self) -> int:
        return self.encoder_depth if self.fusion_mode == "att" else 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(**d)


VARIANT_PRESETS = {
    "pifu_mv_mean": dict(fusion_mode="mean", use_proxy=False,
                         use_global_maps=False, use_fine=False),
    "pifu_mv_att": dict(fusion_mode="att", use_proxy=False,
                        use_global_maps=False, use_fine=False),
    "pifuhd_mv_mean": dict(fusion_mode="mean", use_proxy=False,
                           use_global_maps=False, use_fine=True),
    "pifuhd_mv_att": dict(fusion_mode="att", use_proxy=False,
                          use_global_maps=False, use_fine=True),
    "ours": dict(fusion_mode="att", use_proxy=True,
                 use_global_maps=True, use_fine=True),
    "ours_no_att": dict(fusion_mode="mean", use_proxy=True,
                        use_global_maps=True, use_fine=True),
    "ours_no_sn": dict(fusion_mode="att", use_proxy=True,
                       use_global_maps=False, use_fine=True),
}


def variant_config(mode: str, base: PipelineConfig | None = None) -> PipelineConfig:
    if mode not in VARIANT_PRESETS:
        raise ValueError(f"unknown variant {mode!r}; "
                         f"expected one of {sorted(VARIANT_PRESETS)}")
    base = base or PipelineConfig()
    return replace(base, **VARIANT_PRESETS[mode])


# ---------------------------------------------------------------------------
# scene containers


@dataclass
class PersonViews:
    """Per-view inputs for one person, all channel-first float32."""

    cameras: list[Camera]               # at fine (full) resolution
    coarse_images: np.ndarray           # (n, 3, Rc, Rc), occlusion-composited
    coarse_masks: np.ndarray            # (n, Rc, Rc)
    coarse_depths: np.ndarray           # (n, Rc, Rc)
    fine_images: np.ndarray             # (n, 3, Rf, Rf)
    fine_normals: np.ndarray            # (n, 3, Rf, Rf)  frontal normal maps
    fine_global_maps: np.ndarray        # (n, 3, Rf, Rf)  proxy canonical maps
    fine_masks: np.ndarray              # (n, Rf, Rf)
    fine_depths: np.ndarray             # (n, Rf, Rf)
    center_depths: np.ndarray           # (n,) camera depth of the cube center

    @property
    def n_views(self) -> int:
        return len(self.cameras)


@dataclass
class SceneSample:
    """One person of one scene: proxy, ground truth, views, labeled points."""

    scene: str
    person: int
    body: SkinnedBody
    pose: PoseParams
    transform: ProxySpaceTransform
    gt_mesh_proxy: TriangleMesh
    volume: np.ndarray                  # (R, R, R) proxy occupancy in [0,1]^3
    views: PersonViews
    points: np.ndarray                  # (N, 3) proxy space
    labels: np.ndarray                  # (N,) in {0, 1}


def sample_training_points(gt_mesh_proxy: TriangleMesh, count: int,
                           near_fraction: float, sigma_near: float,
                           rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Surface-biased query points with inside/outside labels.

    near_fraction of the points are area-uniform surface samples with an
    isotropic Gaussian offset of scale sigma_near; the rest are uniform in
    the unit cube. Everything is clamped into [0, 1]^3 and labeled by the
    ray-parity inside test.
    """
    from .evaluate import sample_surface_points

    n_near = int(round(count * near_fraction))
    n_uni = count - n_near
    pts = []
    if n_near:
        surf = sample_surface_points(gt_mesh_proxy, n_near, rng)
        pts.append(surf + rng.normal(scale=sigma_near, size=surf.shape))
    if n_uni:
        pts.append(rng.uniform(0.0, 1.0, size=(n_uni, 3)))
    points = np.clip(np.concatenate(pts), 0.0, 1.0)
    labels = points_inside_fast(gt_mesh_proxy, points).astype(np.float64)
    return points, labels


# ---------------------------------------------------------------------------
# network building blocks


class ConvStack2d:
    def __init__(self, store: ParamStore, name: str, specs, rng,
                 first_input_grad: bool = False):
        # specs: list of (c_in, c_out, k, stride, pad)
        self.convs = []
        self.acts = []
        for i, (ci, co, k, s, p) in enumerate(specs):
            self.convs.append(Conv2d(store, f"{name}.conv{i}", ci, co, k, s, p,
                                     rng, input_grad=first_input_grad or i > 0))
            self.acts.append(LeakyReLU(0.01))

    def forward(self, x: np.ndarray) -> np.ndarray:
        for conv, act in zip(self.convs, self.acts):
            x = act.forward(conv.forward(x))
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray | None:
        for conv, act in zip(reversed(self.convs), reversed(self.acts)):
            dy = conv.backward(act.backward(dy))
        return dy


class ConvStack3d:
    def __init__(self, store: ParamStore, name: str, specs, rng):
        self.convs = []
        self.acts = []
        for i, (ci, co, k, s, p) in enumerate(specs):
            self.convs.append(Conv3d(store, f"{name}.conv{i}", ci, co, k, s, p,
                                     rng, input_grad=i > 0))
            self.acts.append(LeakyReLU(0.01))

    def forward(self, x: np.ndarray) -> np.ndarray:
        for conv, act in zip(self.convs, self.acts):
            x = act.forward(conv.forward(x))
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray | None:
        for conv, act in zip(reversed(self.convs), reversed(self.acts)):
            dy = conv.backward(act.backward(dy))
        return dy


class ImplicitMLP:
    """Occupancy head with one skip connection and an embedding tap.

    layer0: d_in -> hidden, layer1: [hidden, d_in] -> hidden (skip concat),
    layer2: hidden -> d_mid (the embedding), head: d_mid -> 1 -> sigmoid.
    """

    def __init__(self, store: ParamStore, name: str, d_in: int, hidden: int,
                 d_mid: int, rng: np.random.Generator):
        self.l0 = Linear(store, f"{name}.l0", d_in, hidden, rng)
        self.a0 = LeakyReLU(0.01)
        self.l1 = Linear(store, f"{name}.l1", hidden + d_in, hidden, rng)
        self.a1 = LeakyReLU(0.01)
        self.l2 = Linear(store, f"{name}.l2", hidden, d_mid, rng)
        self.a2 = LeakyReLU(0.01)
        self.head = Linear(store, f"{name}.head", d_mid, 1, rng)
        # small head keeps the untrained occupancy near 0.5
        store.params[f"{name}.head.W"][...] *= 0.1
        self.sig = Sigmoid()
        self._d_in = d_in

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = f32(x)
        h0 = self.a0.forward(self.l0.forward(x))
        h1 = self.a1.forward(self.l1.forward(np.concatenate([h0, x], axis=-1)))
        mid = self.a2.forward(self.l2.forward(h1))
        s = self.sig.forward(self.head.forward(mid))[..., 0]
        return s, mid

    def backward(self, ds: np.ndarray, dmid: np.ndarray | None = None) -> np.ndarray:
        d_at_mid = self.head.backward(self.sig.backward(f32(ds)[..., None]))
        if dmid is not None:
            d_at_mid = d_at_mid + f32(dmid)
        dh1 = self.l2.backward(self.a2.backward(d_at_mid))
        dcat = self.l1.backward(self.a1.backward(dh1))
        dh0 = dcat[..., :-self._d_in]
        dx_skip = dcat[..., -self._d_in:]
        dx = self.l0.backward(self.a0.backward(dh0))
        return dx + dx_skip


class CoarseNet:
    """Occupancy from per-view image features, normalized depth, and (when
    enabled) trilinear proxy-volume features, fused across views."""

    def __init__(self, config: PipelineConfig, store: ParamStore | None = None,
                 rng: np.random.Generator | None = None):
        self.config = config
        self.store = store or ParamStore()
        rng = rng or np.random.default_rng(config.seed)
        c = config
        self.image_enc = ConvStack2d(self.store, "coarse.img", [
            (3, 16, 4, 2, 1), (16, 32, 4, 2, 1), (32, c.c_coarse, 3, 1, 1),
        ], rng)
        if c.use_proxy:
            self.volume_enc = ConvStack3d(self.store, "coarse.vol", [
                (1, 8, 3, 1, 1), (8, c.c_volume, 3, 2, 1),
            ], rng)
        row_dim = c.c_coarse + 1 + (c.c_volume if c.use_proxy else 0)
        self.embed = Linear(self.store, "coarse.embed", row_dim, c.d_k, rng)
        self.encoder = AttentionEncoder(self.store, "coarse.enc", c.d_k,
                                        n_head=c.n_head,
                                        depth=c.effective_depth,
                                        d_ff=c.d_ff, rng=rng)
        self.mlp = ImplicitMLP(self.store, "coarse.mlp", c.d_k, c.mlp_hidden,
                               c.omega_dim, rng)
        self.clamp_warnings = 0
        self._cache = None

    # view encoding ---------------------------------------------------------
    def encode_views(self, images: np.ndarray) -> np.ndarray:
        return self.image_enc.forward(f32(images))

    def encode_volume(self, volume: np.ndarray) -> np.ndarray:
        # (nx, ny, nz) over the unit cube -> (1, 1, D=z, H=y, W=x)
        vol_in = f32(volume).transpose(2, 1, 0)[None, None]
        feat = self.volume_enc.forward(vol_in)          # (1, C, D, H, W)
        return feat[0].transpose(1, 2, 3, 0)            # (D, H, W, C)

    def prepare(self, sample: SceneSample,
                images: np.ndarray | None = None) -> dict:
        """Encode the per-scene inputs once; reusable across query batches
        (inference only: backward needs the caches of the last forward)."""
        if images is None:
            images = sample.views.coarse_images
        prepared = {"fmaps": self.encode_views(images)}
        if self.config.use_proxy:
            prepared["volume_feat"] = self.encode_volume(sample.volume)
        return prepared

    # query -----------------------------------------------------------------
    def query(self, sample: SceneSample, points: np.ndarray,
              images: np.ndarray | None = None,
              prepared: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Occupancy and embedding for proxy-space points, (P,) and (P, mid)."""
        c = self.config
        views = sample.views
        n = views.n_views
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        clipped = np.clip(pts, 0.0, 1.0)
        n_out = int((np.abs(clipped - pts) > 1e-12).any(axis=1).sum())
        if n_out:
            self.clamp_warnings += n_out
        pts = clipped
        P = len(pts)

        if prepared is None:
            prepared = self.prepare(sample, images)
        fmaps = prepared["fmaps"]                       # (n, C, h, w)
        rows = np.empty((P, n, fmaps.shape[1] + 1
                         + (c.c_volume if c.use_proxy else 0)), dtype=default_dtype())
        world = sample.transform.to_world(pts)
        samplers = []
        scale_xy = fmaps.shape[2] / views.cameras[0].height
        for v in range(n):
            cam_v = views.cameras[v]
            xy, z = project_points(cam_v, world)
            fxy = (xy + 0.5) * scale_xy - 0.5
            sampler = BilinearSample()
            feat = sampler.forward(fmaps[v].transpose(1, 2, 0), fxy)
            samplers.append(sampler)
            rows[:, v, :fmaps.shape[1]] = feat
            rows[:, v, fmaps.shape[1]] = (sample.transform.scale
                                          * (z - views.center_depths[v]))
        tri_sampler = None
        if c.use_proxy:
            tri_sampler = TrilinearSample()
            psi = tri_sampler.forward(prepared["volume_feat"], pts)  # (P, C_V)
            rows[:, :, -c.c_volume:] = psi[:, None, :]

        embedded = self.embed.forward(rows)             # (P, n, d_k)
        fused = self.encoder.forward(embedded)          # (P, d_k)
        s, omega = self.mlp.forward(fused)
        self._cache = (samplers, tri_sampler, fmaps.shape, n)
        return s, omega

    def backward(self, ds: np.ndarray, domega: np.ndarray | None = None) -> None:
        c = self.config
        samplers, tri_sampler, fshape, n = self._cache
        dfused = self.mlp.backward(ds, domega)
        dembedded = self.encoder.backward(dfused)
        drows = self.embed.backward(dembedded)          # (P, n, row)
        c_img = fshape[1]
        dmaps = np.zeros(fshape, dtype=default_dtype())
        for v in range(n):
            dmap = samplers[v].backward(drows[:, v, :c_img])
            dmaps[v] = dmap.transpose(2, 0, 1)
        self.image_enc.backward(dmaps)
        if c.use_proxy:
            dpsi = drows[:, :, -c.c_volume:].sum(axis=1)
            dvol = tri_sampler.backward(dpsi)           # (D, H, W, C)
            self.volume_enc.backward(dvol.transpose(3, 0, 1, 2)[None])


class FineNet:
    """High-resolution refinement conditioned on the coarse embedding."""

    def __init__(self, config: PipelineConfig, store: ParamStore | None = None,
                 rng: np.random.Generator | None = None):
        self.config = config
        self.store = store or ParamStore()
        rng = rng or np.random.default_rng(config.seed + 1)
        c = config
        in_ch = 6 + (3 if c.use_global_maps else 0)
        self.in_ch = in_ch
        self.image_enc = ConvStack2d(self.store, "fine.img", [
            (in_ch, 16, 4, 4, 0), (16, c.c_fine, 3, 1, 1),
        ], rng)
        self.embed = Linear(self.store, "fine.embed", c.c_fine, c.d_k, rng)
        self.encoder = AttentionEncoder(self.store, "fine.enc", c.d_k,
                                        n_head=c.n_head,
                                        depth=c.effective_depth,
                                        d_ff=c.d_ff, rng=rng)
        self.mlp = ImplicitMLP(self.store, "fine.mlp", c.d_k + c.omega_dim,
                               c.mlp_hidden, c.omega_dim, rng)
        self.clamp_warnings = 0
        self._cache = None

    def stack_inputs(self, views: PersonViews,
                     normals: np.ndarray | None = None,
                     images: np.ndarray | None = None) -> np.ndarray:
        parts = [views.fine_images if images is None else images,
                 views.fine_normals if normals is None else normals]
        if self.config.use_global_maps:
            parts.append(views.fine_global_maps)
        return np.concatenate([f32(p) for p in parts], axis=1)

    def prepare(self, sample: SceneSample,
                stacks: np.ndarray | None = None) -> dict:
        if stacks is None:
            stacks = self.stack_inputs(sample.views)
        return {"fmaps": self.image_enc.forward(stacks)}

    def query(self, sample: SceneSample, points: np.ndarray,
              omega: np.ndarray, stacks: np.ndarray | None = None,
              prepared: dict | None = None) -> np.ndarray:
        c = self.config
        views = sample.views
        n = views.n_views
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        clipped = np.clip(pts, 0.0, 1.0)
        n_out = int((np.abs(clipped - pts) > 1e-12).any(axis=1).sum())
        if n_out:
            self.clamp_warnings += n_out
        pts = clipped
        P = len(pts)
        if prepared is None:
            prepared = self.prepare(sample, stacks)
        fmaps = prepared["fmaps"]                       # (n, C, h, w)
        rows = np.empty((P, n, fmaps.shape[1]), dtype=default_dtype())
        world = sample.transform.to_world(pts)
        samplers = []
        scale_xy = fmaps.shape[2] / views.cameras[0].height
        for v in range(n):
            xy, _ = project_points(views.cameras[v], world)
            fxy = (xy + 0.5) * scale_xy - 0.5
            sampler = BilinearSample()
            rows[:, v] = sampler.forward(fmaps[v].transpose(1, 2, 0), fxy)
            samplers.append(sampler)
        embedded = self.embed.forward(rows)
        fused = self.encoder.forward(embedded)
        s, _ = self.mlp.forward(np.concatenate([fused, f32(omega)], axis=-1))
        self._cache = (samplers, fmaps.shape, n)
        return s

    def backward(self, ds: np.ndarray) -> None:
        c = self.config
        samplers, fshape, n = self._cache
        dcat = self.mlp.backward(ds)
        dfused = dcat[:, :c.d_k]   # frozen coarse: the omega slice is dropped
        dembedded = self.encoder.backward(dfused)
        drows = self.embed.backward(dembedded)
        dmaps = np.zeros(fshape, dtype=default_dtype())
        for v in range(n):
            dmaps[v] = samplers[v].backward(drows[:, v]).transpose(2, 0, 1)
        self.image_enc.backward(dmaps)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    coarse_losses: list[float] = field(default_factory=list)
    fine_losses: list[float] = field(default_factory=list)
    coarse_ckpt: str | None = None
    fine_ckpt: str | None = None


def _augment_views(sample: SceneSample, donor: SceneSample, view: int,
                   rng: np.random.Generator
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project another person into one view: zero observed pixels wherever
    the donor's depth-shifted silhouette is strictly closer.

    Only the observed channels (images and frontal normal maps) lose pixels;
    proxy global maps come from the fitted body and stay complete, which is
    exactly the signal that compensates for occlusion.
    """
    coarse = sample.views.coarse_images.copy()
    fine_img = sample.views.fine_images.copy()
    fine_nrm = sample.views.fine_normals.copy()
    shift = rng.uniform(-0.4, 0.1)
    dv = view % donor.views.n_views
    for imgs, masks, depths, d_masks, d_depths in (
        ((coarse,), sample.views.coarse_masks, sample.views.coarse_depths,
         donor.views.coarse_masks, donor.views.coarse_depths),
        ((fine_img, fine_nrm), sample.views.fine_masks, sample.views.fine_depths,
         donor.views.fine_masks, donor.views.fine_depths),
    ):
        om = d_masks[dv] > 0.5
        od = d_depths[dv] + shift
        tm = masks[view] > 0.5
        hidden = tm & om & (od < depths[view])
        for img in imgs:
            img[view][:, hidden] = 0.0
    return coarse, fine_img, fine_nrm


def train(config: PipelineConfig, samples: list[SceneSample], out_dir,
          steps_coarse: int, steps_fine: int,
          log_every: int = 100, verbose: bool = False) -> TrainResult:
    """BCE training on sampled points, coarse stage first, then fine with the
    coarse net frozen. Deterministic for a fixed config.seed."""
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    result = TrainResult()

    coarse = CoarseNet(config, rng=np.random.default_rng(config.seed + 101))
    fine = FineNet(config, rng=np.random.default_rng(config.seed + 202)) \
        if config.use_fine else None

    coarse_path = out_dir / "coarse.ckpt"
    fine_path = out_dir / "fine.ckpt"

    def pick_batch():
        sample = samples[int(rng.integers(len(samples)))]
        idx = rng.integers(len(sample.points), size=config.points_per_step)
        return sample, sample.points[idx], sample.labels[idx]

    opt = Adam(coarse.store, lr=config.lr)
    for step in range(steps_coarse):
        sample, pts, labels = pick_batch()
        images = None
        if config.occlusion_augment_prob > 0 and len(samples) > 1 \
                and rng.random() < config.occlusion_augment_prob:
            donor = samples[int(rng.integers(len(samples)))]
            view = int(rng.integers(sample.views.n_views))
            images, _, _ = _augment_views(sample, donor, view, rng)
        coarse.store.zero_grads()
        s, _ = coarse.query(sample, pts, images=images)
        loss, ds = bce_loss(s, labels)
        if not np.isfinite(loss):
            coarse.store.save(coarse_path)
            raise TrainingDiverged(step, coarse_path)
        coarse.backward(ds)
        opt.step()
        result.coarse_losses.append(loss)
        if verbose and step % log_every == 0:
            print(f"[coarse {step:5d}] bce {loss:.4f}")
    coarse.store.save(coarse_path)
    result.coarse_ckpt = str(coarse_path)

    if fine is not None:
        opt_f = Adam(fine.store, lr=config.lr)
        for step in range(steps_fine):
            sample, pts, labels = pick_batch()
            stacks = None
            if config.occlusion_augment_prob > 0 and len(samples) > 1 \
                    and rng.random() < config.occlusion_augment_prob:
                donor = samples[int(rng.integers(len(samples)))]
                view = int(rng.integers(sample.views.n_views))
                _, fimgs, fnrms = _augment_views(sample, donor, view, rng)
                stacks = fine.stack_inputs(sample.views, normals=fnrms,
                                           images=fimgs)
            _, omega = coarse.query(sample, pts)
            fine.store.zero_grads()
            s = fine.query(sample, pts, omega, stacks=stacks)
            loss, ds = bce_loss(s, labels)
            if not np.isfinite(loss):
                fine.store.save(fine_path)
                raise TrainingDiverged(step, fine_path)
            fine.backward(ds)
            opt_f.step()
            result.fine_losses.append(loss)
            if verbose and step % log_every == 0:
                print(f"[fine   {step:5d}] bce {loss:.4f}")
        fine.store.save(fine_path)
        result.fine_ckpt = str(fine_path)

    with open(out_dir / "loss_log.json", "w") as fh:
        json.dump({"coarse": result.coarse_losses, "fine": result.fine_losses},
                  fh)
        fh.write("\n")
    return result


def load_nets(config: PipelineConfig, out_dir) -> tuple[CoarseNet, "FineNet | None"]:
    from pathlib import Path

    out_dir = Path(out_dir)
    coarse = CoarseNet(config, rng=np.random.default_rng(config.seed + 101))
    coarse.store.load(out_dir / "coarse.ckpt")
    fine = None
    if config.use_fine:
        fine = FineNet(config, rng=np.random.default_rng(config.seed + 202))
        fine.store.load(out_dir / "fine.ckpt")
    return coarse, fine


# ---------------------------------------------------------------------------
# grid evaluation and reconstruction


def _unit_grid(dims: int) -> ScalarGrid:
    return ScalarGrid((dims,) * 3, (0.0, 0.0, 0.0), 1.0 / dims,
                      np.zeros((dims,) * 3))


def evaluate_field_dense(fn, dims: int, batch: int = 65536) -> tuple[ScalarGrid, int]:
    grid = _unit_grid(dims)
    xs = [grid.cell_centers_1d(a) for a in range(3)]
    X, Y, Z = np.meshgrid(*xs, indexing="ij")
    pts = np.stack([X, Y, Z], -1).reshape(-1, 3)
    vals = np.empty(len(pts))
    for s in range(0, len(pts), batch):
        vals[s:s + batch] = fn(pts[s:s + batch])
    grid.values = vals.reshape(grid.dims)
    return grid, len(pts)


def evaluate_field_hierarchical(fn, dims: int, level: float = 0.5,
                                band: float = 0.4, stride: int = 8,
                                batch: int = 65536) -> tuple[ScalarGrid, int]:
    """Two-level evaluation: a stride-8 lattice first, then full resolution
    only inside blocks whose corner values are within ``band`` of the level
    set or straddle it. Culled blocks are filled with their corner mean,
    which by construction cannot introduce crossings."""
    grid = _unit_grid(dims)
    xs = [grid.cell_centers_1d(a) for a in range(3)]
    coarse_idx = np.unique(np.r_[np.arange(0, dims, stride), dims - 1])
    ci = coarse_idx
    CX, CY, CZ = np.meshgrid(ci, ci, ci, indexing="ij")
    coarse_pts = np.stack([xs[0][CX], xs[1][CY], xs[2][CZ]], -1).reshape(-1, 3)
    coarse_vals = np.empty(len(coarse_pts))
    for s in range(0, len(coarse_pts), batch):
        coarse_vals[s:s + batch] = fn(coarse_pts[s:s + batch])
    evaluated = len(coarse_pts)
    cv = coarse_vals.reshape(len(ci), len(ci), len(ci))

    values = np.empty(grid.dims)
    need = np.zeros(grid.dims, dtype=bool)
    nb = len(ci) - 1
    corner_max = np.full((nb, nb, nb), -np.inf)
    corner_min = np.full((nb, nb, nb), np.inf)
    for ox in (0, 1):
        for oy in (0, 1):
            for oz in (0, 1):
                block = cv[ox:nb + ox, oy:nb + oy, oz:nb + oz]
                corner_max = np.maximum(corner_max, block)
                corner_min = np.minimum(corner_min, block)
    refine = (corner_max >= level - band) & (corner_min <= level + band)
    # straddling blocks always refine, band or not
    refine |= (corner_min < level) & (corner_max > level)

    for bx in range(nb):
        x0, x1 = ci[bx], ci[bx + 1]
        for by in range(nb):
            y0, y1 = ci[by], ci[by + 1]
            for bz in range(nb):
                z0, z1 = ci[bz], ci[bz + 1]
                if refine[bx, by, bz]:
                    need[x0:x1 + 1, y0:y1 + 1, z0:z1 + 1] = True
                else:
                    fill = 0.125 * (
                        cv[bx, by, bz] + cv[bx + 1, by, bz] + cv[bx, by + 1, bz]
                        + cv[bx, by, bz + 1] + cv[bx + 1, by + 1, bz]
                        + cv[bx + 1, by, bz + 1] + cv[bx, by + 1, bz + 1]
                        + cv[bx + 1, by + 1, bz + 1])
                    values[x0:x1 + 1, y0:y1 + 1, z0:z1 + 1] = fill
    # seed known lattice values, then evaluate what remains
    KX, KY, KZ = np.meshgrid(ci, ci, ci, indexing="ij")
    values[KX, KY, KZ] = cv
    known = np.zeros(grid.dims, dtype=bool)
    known[KX, KY, KZ] = True
    todo = need & ~known
    ti = np.nonzero(todo)
    pts = np.stack([xs[0][ti[0]], xs[1][ti[1]], xs[2][ti[2]]], -1)
    vals = np.empty(len(pts))
    for s in range(0, len(pts), batch):
        vals[s:s + batch] = fn(pts[s:s + batch])
    evaluated += len(pts)
    values[ti] = vals
    grid.values = values
    return grid, evaluated


def extract_level_mesh(grid: ScalarGrid, level: float) -> TriangleMesh:
    """Marching cubes on an occupancy field with outward-facing output
    (occupancy decreases outward, so the field is negated for extraction)."""
    neg = ScalarGrid(grid.dims, grid.origin, grid.spacing, -grid.values)
    return marching_cubes(neg, -level)


@dataclass
class PersonReconstruction:
    mesh_world: TriangleMesh
    mesh_proxy: TriangleMesh
    coarse_mesh_proxy: TriangleMesh | None
    evaluated_points: int


def reconstruct_person(coarse: CoarseNet, fine: FineNet | None,
                       sample: SceneSample, grid_dims: int = 128,
                       level: float = 0.5, hierarchical: bool = True,
                       coarse_dims: int = 64,
                       gt_normal_maps: bool = False) -> PersonReconstruction:
    """Coarse pass (plus a frontal-normal re-render of the coarse mesh when
    the fine level is active), then the fine field on the full grid."""
    evaluated = 0
    coarse_prep = coarse.prepare(sample)

    def coarse_fn(pts):
        s, _ = coarse.query(sample, pts, prepared=coarse_prep)
        return s.astype(np.float64)

    if fine is None:
        grid, n_eval = (evaluate_field_hierarchical(coarse_fn, grid_dims, level)
                        if hierarchical else
                        evaluate_field_dense(coarse_fn, grid_dims))
        mesh_proxy = extract_level_mesh(grid, level)
        return PersonReconstruction(sample.transform.mesh_to_world(mesh_proxy),
                                    mesh_proxy, None, n_eval)

    cgrid, n_eval = evaluate_field_hierarchical(coarse_fn, coarse_dims, level)
    evaluated += n_eval
    coarse_mesh = extract_level_mesh(cgrid, level)

    stacks = None
    if not gt_normal_maps and not coarse_mesh.is_empty():
        from .geometry import compute_vertex_normals

        world_mesh = compute_vertex_normals(
            sample.transform.mesh_to_world(coarse_mesh))
        normals = np.stack([
            rasterize(world_mesh, cam, "posed_normal").values.transpose(2, 0, 1)
            for cam in sample.views.cameras])
        stacks = fine.stack_inputs(sample.views, normals=normals)
    fine_prep = fine.prepare(sample, stacks)

    def fine_fn(pts):
        _, omega = coarse.query(sample, pts, prepared=coarse_prep)
        return fine.query(sample, pts, omega, prepared=fine_prep).astype(np.float64)

    grid, n_eval = (evaluate_field_hierarchical(fine_fn, grid_dims, level)
                    if hierarchical else
                    evaluate_field_dense(fine_fn, grid_dims))
    evaluated += n_eval
    mesh_proxy = extract_level_mesh(grid, level)
    return PersonReconstruction(sample.transform.mesh_to_world(mesh_proxy),
                                mesh_proxy, coarse_mesh, evaluated)


def reconstruct(coarse: CoarseNet, fine: FineNet | None,
                samples: list[SceneSample], grid_dims: int = 128,
                level: float = 0.5,
                hierarchical: bool = True) -> list[PersonReconstruction]:
    """One mesh per person, all in world space; the scene is their union."""
    return [reconstruct_person(coarse, fine, s, grid_dims, level, hierarchical)
            for s in samples]
