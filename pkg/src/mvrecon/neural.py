"""Minimal float32 neural layers with hand-written backward passes.

No general autodiff tape: each network composes these layers and calls their
``backward`` methods in reverse order. Every differentiable operation here is
verified against central finite differences in the test suite.

Each layer caches what its backward pass needs during forward; a backward
call therefore pairs with the most recent forward. Parameters live in a
``ParamStore`` by name; backward accumulates into the matching gradient
buffers.
"""

from __future__ import annotations

import struct

import numpy as np

DEBUG_NAN_CHECKS = False

# float32 is the working precision; float64 exists so deep composed chains
# can be finite-difference-verified above the f32 noise floor
_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    global _DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be float32 or float64")
    _DTYPE = dtype


def default_dtype():
    return _DTYPE


def _check(x: np.ndarray) -> np.ndarray:
    if DEBUG_NAN_CHECKS and not np.isfinite(x).all():
        raise FloatingPointError("non-finite values in tensor")
    return x


def f32(x) -> np.ndarray:
    """Cast to the working dtype (float32 unless verification mode)."""
    return np.ascontiguousarray(x, dtype=_DTYPE)


class ParamStore:
    """Named float32 parameters with mirrored gradient buffers."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        self.params[name] = f32(value)
        self.grads[name] = np.zeros_like(self.params[name])
        return self.params[name]

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def names(self) -> list[str]:
        return sorted(self.params)

    def save(self, path) -> None:
        """Checkpoint format: "CKPT", u32 count, then per parameter
        u16 name length, name bytes, u32 rank, u32 dims, f32 data (LE)."""
        with open(path, "wb") as fh:
            fh.write(b"CKPT")
            fh.write(struct.pack("<I", len(self.params)))
            for name in self.names():
                p = self.params[name]
                nb = name.encode("utf-8")
                fh.write(struct.pack("<H", len(nb)))
                fh.write(nb)
                fh.write(struct.pack("<I", p.ndim))
                fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
                fh.write(p.astype("<f4").tobytes())

    def load(self, path) -> None:
        with open(path, "rb") as fh:
            if fh.read(4) != b"CKPT":
                raise ValueError("not a checkpoint file")
            count = struct.unpack("<I", fh.read(4))[0]
            for _ in range(count):
                nlen = struct.unpack("<H", fh.read(2))[0]
                name = fh.read(nlen).decode("utf-8")
                rank = struct.unpack("<I", fh.read(4))[0]
                shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
                n = int(np.prod(shape)) if rank else 1
                data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
                if name in self.params:
                    if self.params[name].shape != data.shape:
                        raise ValueError(f"shape mismatch for {name!r}: "
                                         f"{self.params[name].shape} vs {data.shape}")
                    self.params[name][...] = data
                else:
                    self.add(name, data.copy())


def xavier(rng: np.random.Generator, d_in: int, d_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=shape).astype(_DTYPE)


class Linear:
    """y = x @ W + b on the last axis."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, bias: bool = True):
        self.store = store
        self.name = name
        self.W = store.add(f"{name}.W", xavier(rng, d_in, d_out, (d_in, d_out)))
        self.b = store.add(f"{name}.b", np.zeros(d_out)) if bias else None
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = f32(x)
        self._x = x
        y = x @ self.W
        if self.b is not None:
            y = y + self.b
        return _check(y)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        lead = x.reshape(-1, x.shape[-1])
        dlead = f32(dy).reshape(-1, dy.shape[-1])
        self.store.grads[f"{self.name}.W"] += lead.T @ dlead
        if self.b is not None:
            self.store.grads[f"{self.name}.b"] += dlead.sum(axis=0)
        return (dlead @ self.W.T).reshape(x.shape)


class LeakyReLU:
    def __init__(self, slope: float = 0.01):
        self.slope = slope
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = f32(x)
        self._mask = x > 0
        return _check(np.where(self._mask, x, self.slope * x))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.where(self._mask, f32(dy), _DTYPE(self.slope) * f32(dy))


class Sigmoid:
    def __init__(self):
        self._y = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = f32(x)
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        self._y = y
        return _check(y)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return f32(dy) * self._y * (1.0 - self._y)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = f32(x)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return _check(e / e.sum(axis=axis, keepdims=True))


def softmax_backward(y: np.ndarray, dy: np.ndarray, axis: int = -1) -> np.ndarray:
    dy = f32(dy)
    inner = (dy * y).sum(axis=axis, keepdims=True)
    return y * (dy - inner)


class Softmax:
    """Softmax over the last axis."""

    def __init__(self):
        self._y = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._y = softmax(x, axis=-1)
        return self._y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return softmax_backward(self._y, dy, axis=-1)


class LayerNorm:
    """Normalization over the last axis with learnable gain and bias."""

    EPS = 1e-5

    def __init__(self, store: ParamStore, name: str, dim: int):
        self.store = store
        self.name = name
        self.g = store.add(f"{name}.g", np.ones(dim))
        self.b = store.add(f"{name}.b", np.zeros(dim))
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = f32(x)
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.EPS)
        xhat = xc * inv
        self._cache = (xhat, inv)
        return _check(xhat * self.g + self.b)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv = self._cache
        dy = f32(dy)
        lead = (-1, dy.shape[-1])
        self.store.grads[f"{self.name}.g"] += (dy * xhat).reshape(lead).sum(axis=0)
        self.store.grads[f"{self.name}.b"] += dy.reshape(lead).sum(axis=0)
        dxhat = dy * self.g
        n = dy.shape[-1]
        term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        del n
        return term * inv


class Conv2d:
    """2D convolution over (N, C, H, W) with stride and zero padding."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 k: int, stride: int, pad: int, rng: np.random.Generator,
                 input_grad: bool = True):
        self.store = store
        self.name = name
        self.k, self.stride, self.pad = k, stride, pad
        fan = c_in * k * k
        self.W = store.add(f"{name}.W", xavier(rng, fan, c_out, (c_out, c_in, k, k)))
        self.b = store.add(f"{name}.b", np.zeros(c_out))
        self.input_grad = input_grad
        self._xpad = None

    def out_size(self, H: int, W: int) -> tuple[int, int]:
        k, s, p = self.k, self.stride, self.pad
        return (H + 2 * p - k) // s + 1, (W + 2 * p - k) // s + 1

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = f32(x)
        N, C, H, W = x.shape
        if C != self.W.shape[1]:
            raise ValueError(f"conv2d {self.name}: input has {C} channels, "
                             f"weights expect {self.W.shape[1]}")
        k, s, p = self.k, self.stride, self.pad
        Ho, Wo = self.out_size(H, W)
        if Ho < 1 or Wo < 1:
            raise ValueError(f"conv2d {self.name}: input {H}x{W} too small for k={k}")
        xpad = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        self._xpad = xpad
        y = np.empty((N, self.W.shape[0], Ho, Wo), dtype=_DTYPE)
        y[...] = self.b[None, :, None, None]
        for ky in range(k):
            for kx in range(k):
                sl = xpad[:, :, ky:ky + Ho * s:s, kx:kx + Wo * s:s]
                y += np.einsum("nchw,oc->nohw", sl, self.W[:, :, ky, kx],
                               optimize=True)
        return _check(y)

    def backward(self, dy: np.ndarray) -> np.ndarray | None:
        dy = f32(dy)
        xpad = self._xpad
        N, C = xpad.shape[0], xpad.shape[1]
        k, s = self.k, self.stride
        Ho, Wo = dy.shape[2], dy.shape[3]
        dW = self.store.grads[f"{self.name}.W"]
        self.store.grads[f"{self.name}.b"] += dy.sum(axis=(0, 2, 3))
        dxpad = np.zeros_like(xpad) if self.input_grad else None
        for ky in range(k):
            for kx in range(k):
                sl = xpad[:, :, ky:ky + Ho * s:s, kx:kx + Wo * s:s]
                dW[:, :, ky, kx] += np.einsum("nohw,nchw->oc", dy, sl, optimize=True)
                if self.input_grad:
                    dxpad[:, :, ky:ky + Ho * s:s, kx:kx + Wo * s:s] += \
                        np.einsum("nohw,oc->nchw", dy, self.W[:, :, ky, kx],
                                  optimize=True)
        if not self.input_grad:
            return None
        p = self.pad
        if p:
            return dxpad[:, :, p:-p, p:-p]
        return dxpad


class Conv3d:
    """3D convolution over (N, C, D, H, W) with stride and zero padding."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 k: int, stride: int, pad: int, rng: np.random.Generator,
                 input_grad: bool = True):
        self.store = store
        self.name = name
        self.k, self.stride, self.pad = k, stride, pad
        fan = c_in * k ** 3
        self.W = store.add(f"{name}.W", xavier(rng, fan, c_out, (c_out, c_in, k, k, k)))
        self.b = store.add(f"{name}.b", np.zeros(c_out))
        self.input_grad = input_grad
        self._xpad = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = f32(x)
        N, C, D, H, W = x.shape
        if C != self.W.shape[1]:
            raise ValueError(f"conv3d {self.name}: input has {C} channels, "
                             f"weights expect {self.W.shape[1]}")
        k, s, p = self.k, self.stride, self.pad
        Do = (D + 2 * p - k) // s + 1
        Ho = (H + 2 * p - k) // s + 1
        Wo = (W + 2 * p - k) // s + 1
        if min(Do, Ho, Wo) < 1:
            raise ValueError(f"conv3d {self.name}: input too small for k={k}")
        xpad = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x
        self._xpad = xpad
        y = np.empty((N, self.W.shape[0], Do, Ho, Wo), dtype=_DTYPE)
        y[...] = self.b[None, :, None, None, None]
        for kd in range(k):
            for ky in range(k):
                for kx in range(k):
                    sl = xpad[:, :, kd:kd + Do * s:s, ky:ky + Ho * s:s, kx:kx + Wo * s:s]
                    y += np.einsum("ncdhw,oc->nodhw", sl, self.W[:, :, kd, ky, kx],
                                   optimize=True)
        return _check(y)

    def backward(self, dy: np.ndarray) -> np.ndarray | None:
        dy = f32(dy)
        xpad = self._xpad
        k, s = self.k, self.stride
        Do, Ho, Wo = dy.shape[2:]
        dW = self.store.grads[f"{self.name}.W"]
        self.store.grads[f"{self.name}.b"] += dy.sum(axis=(0, 2, 3, 4))
        dxpad = np.zeros_like(xpad) if self.input_grad else None
        for kd in range(k):
            for ky in range(k):
                for kx in range(k):
                    sl = xpad[:, :, kd:kd + Do * s:s, ky:ky + Ho * s:s, kx:kx + Wo * s:s]
                    dW[:, :, kd, ky, kx] += np.einsum("nodhw,ncdhw->oc", dy, sl,
                                                      optimize=True)
                    if self.input_grad:
                        dxpad[:, :, kd:kd + Do * s:s, ky:ky + Ho * s:s,
                              kx:kx + Wo * s:s] += \
                            np.einsum("nodhw,oc->ncdhw", dy, self.W[:, :, kd, ky, kx],
                                      optimize=True)
        if not self.input_grad:
            return None
        p = self.pad
        if p:
            return dxpad[:, :, p:-p, p:-p, p:-p]
        return dxpad


# ---------------------------------------------------------------------------
# losses (return scalar loss and gradient wrt predictions)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    pred = f32(pred)
    target = f32(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(_DTYPE)


def bce_loss(pred: np.ndarray, target: np.ndarray,
             eps: float = 1e-6) -> tuple[float, np.ndarray]:
    """Binary cross entropy on probabilities in (0, 1)."""
    pred = f32(pred)
    target = f32(target)
    if pred.shape != target.shape:
        raise ValueError(f"bce shapes differ: {pred.shape} vs {target.shape}")
    p = np.clip(pred, eps, 1.0 - eps).astype(np.float64)
    t = target.astype(np.float64)
    loss = float(np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p))))
    grad = ((p - t) / (p * (1 - p))) / p.size
    # clipped predictions have zero gradient outside the clip range
    grad[(pred < eps) | (pred > 1 - eps)] = 0.0
    return loss, grad.astype(_DTYPE)


# ---------------------------------------------------------------------------
# sampling operators


class BilinearSample:
    """Sample (H, W, C) feature maps at continuous pixel coordinates.

    Coordinates outside the image clamp to the border. Gradients flow to the
    map, not to the coordinates.
    """

    def __init__(self):
        self._cache = None

    def forward(self, fmap: np.ndarray, xy: np.ndarray) -> np.ndarray:
        fmap = f32(fmap)
        H, W = fmap.shape[0], fmap.shape[1]
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        x = np.clip(xy[:, 0], 0.0, W - 1.0)
        y = np.clip(xy[:, 1], 0.0, H - 1.0)
        x0 = np.minimum(np.floor(x), W - 2 if W > 1 else 0).astype(np.int64)
        y0 = np.minimum(np.floor(y), H - 2 if H > 1 else 0).astype(np.int64)
        x1 = np.minimum(x0 + 1, W - 1)
        y1 = np.minimum(y0 + 1, H - 1)
        fx = (x - x0).astype(_DTYPE)[:, None]
        fy = (y - y0).astype(_DTYPE)[:, None]
        w00 = (1 - fx) * (1 - fy)
        w10 = fx * (1 - fy)
        w01 = (1 - fx) * fy
        w11 = fx * fy
        out = (w00 * fmap[y0, x0] + w10 * fmap[y0, x1]
               + w01 * fmap[y1, x0] + w11 * fmap[y1, x1])
        self._cache = (fmap.shape, (y0, x0, y1, x1), (w00, w10, w01, w11))
        return _check(out)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        shape, (y0, x0, y1, x1), (w00, w10, w01, w11) = self._cache
        dy = f32(dy)
        dmap = np.zeros(shape, dtype=_DTYPE)
        np.add.at(dmap, (y0, x0), w00 * dy)
        np.add.at(dmap, (y0, x1), w10 * dy)
        np.add.at(dmap, (y1, x0), w01 * dy)
        np.add.at(dmap, (y1, x1), w11 * dy)
        return dmap


class TrilinearSample:
    """Sample (D, H, W, C) volumes at unit-cube coordinates (x, y, z).

    x maps to the W axis, y to H, z to D, align-corners style: coordinate c
    lands on voxel index c * (n - 1). Out-of-range coordinates clamp.
    """

    def __init__(self):
        self._cache = None

    def forward(self, volume: np.ndarray, pts: np.ndarray) -> np.ndarray:
        volume = f32(volume)
        D, H, W = volume.shape[:3]
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        fx = np.clip(pts[:, 0], 0.0, 1.0) * (W - 1)
        fy = np.clip(pts[:, 1], 0.0, 1.0) * (H - 1)
        fz = np.clip(pts[:, 2], 0.0, 1.0) * (D - 1)
        x0 = np.minimum(np.floor(fx), W - 2 if W > 1 else 0).astype(np.int64)
        y0 = np.minimum(np.floor(fy), H - 2 if H > 1 else 0).astype(np.int64)
        z0 = np.minimum(np.floor(fz), D - 2 if D > 1 else 0).astype(np.int64)
        x1 = np.minimum(x0 + 1, W - 1)
        y1 = np.minimum(y0 + 1, H - 1)
        z1 = np.minimum(z0 + 1, D - 1)
        tx = (fx - x0).astype(_DTYPE)[:, None]
        ty = (fy - y0).astype(_DTYPE)[:, None]
        tz = (fz - z0).astype(_DTYPE)[:, None]
        idx = []
        weights = []
        for (zi, wz) in ((z0, 1 - tz), (z1, tz)):
            for (yi, wy) in ((y0, 1 - ty), (y1, ty)):
                for (xi, wx) in ((x0, 1 - tx), (x1, tx)):
                    idx.append((zi, yi, xi))
                    weights.append(wz * wy * wx)
        out = np.zeros((len(pts), volume.shape[3]), dtype=_DTYPE)
        for (zi, yi, xi), w in zip(idx, weights):
            out += w * volume[zi, yi, xi]
        self._cache = (volume.shape, idx, weights)
        return _check(out)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        shape, idx, weights = self._cache
        dy = f32(dy)
        dvol = np.zeros(shape, dtype=_DTYPE)
        for (zi, yi, xi), w in zip(idx, weights):
            np.add.at(dvol, (zi, yi, xi), w * dy)
        return dvol


def bilinear_sample(fmap: np.ndarray, xy: np.ndarray) -> np.ndarray:
    return BilinearSample().forward(fmap, xy)


def trilinear_sample(volume: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return TrilinearSample().forward(volume, pts)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Standard Adam with bias correction; deterministic given update order."""

    def __init__(self, store: ParamStore, lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.params.items()}

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for name in self.store.names():
            g = self.store.grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / b1t
            vhat = v / b2t
            self.store.params[name] -= (self.lr * mhat
                                        / (np.sqrt(vhat) + self.eps)).astype(_DTYPE)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def numerical_grad(f, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar-valued f at x."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_grad_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / denom)
