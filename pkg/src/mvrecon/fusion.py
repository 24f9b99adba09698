"""Multi-view feature fusion: a multi-head self-attention encoder across the
view axis, plus the mean-pooling baseline it reduces to at depth 0.

A feature stack is (n_views, d_k) for one query point, or batched as
(batch, n_views, d_k). Attention runs across views only: every query point
is fused independently, and views form an unordered set (no positional
encoding), so fusion is equivariant to view order.
"""

from __future__ import annotations

import numpy as np

from .neural import (LayerNorm, LeakyReLU, Linear, ParamStore, f32, softmax,
                     softmax_backward, xavier)


def mean_pool(stack: np.ndarray) -> np.ndarray:
    """Arithmetic mean over the view axis: (..., n, d) -> (..., d)."""
    return f32(stack).mean(axis=-2)


class AttentionLayer:
    """One attention sublayer: per-head query/source/target projections,
    scaled dot-product weights over views, head concat, output projection,
    residual add, layer norm."""

    def __init__(self, store: ParamStore, name: str, d_k: int, n_head: int,
                 rng: np.random.Generator):
        if d_k % n_head != 0:
            raise ValueError(f"d_k={d_k} not divisible by n_head={n_head}")
        self.store = store
        self.name = name
        self.d_k = d_k
        self.n_head = n_head
        self.d_head = d_k // n_head
        self.Wq = store.add(f"{name}.Wq", xavier(rng, d_k, d_k, (d_k, d_k)))
        self.Ws = store.add(f"{name}.Ws", xavier(rng, d_k, d_k, (d_k, d_k)))
        self.Wt = store.add(f"{name}.Wt", xavier(rng, d_k, d_k, (d_k, d_k)))
        self.proj = Linear(store, f"{name}.proj", d_k, d_k, rng)
        self.norm = LayerNorm(store, f"{name}.norm", d_k)
        self.last_weights: np.ndarray | None = None
        self._cache = None

    def _split(self, x: np.ndarray) -> np.ndarray:
        B, n, _ = x.shape
        return x.reshape(B, n, self.n_head, self.d_head)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = f32(x)
        B, n, d = x.shape
        q = self._split(x @ self.Wq)
        s = self._split(x @ self.Ws)
        t = self._split(x @ self.Wt)
        scale = 1.0 / np.sqrt(self.d_head)
        scores = np.einsum("bnhd,bmhd->bhnm", q, s, optimize=True) * scale
        attn = softmax(scores, axis=-1)
        self.last_weights = attn
        mixed = np.einsum("bhnm,bmhd->bnhd", attn, t, optimize=True)
        mixed = f32(mixed).reshape(B, n, d)
        y = self.norm.forward(x + self.proj.forward(mixed))
        self._cache = (x, q, s, t, attn)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x, q, s, t, attn = self._cache
        B, n, d = x.shape
        scale = 1.0 / np.sqrt(self.d_head)
        dsum = self.norm.backward(f32(dy))
        dmixed = self.proj.backward(dsum)
        dmixed = dmixed.reshape(B, n, self.n_head, self.d_head)
        dattn = np.einsum("bnhd,bmhd->bhnm", dmixed, t, optimize=True)
        dt = np.einsum("bhnm,bnhd->bmhd", attn, dmixed, optimize=True)
        dscores = softmax_backward(attn, dattn, axis=-1) * scale
        dq = np.einsum("bhnm,bmhd->bnhd", dscores, s, optimize=True)
        ds = np.einsum("bhnm,bnhd->bmhd", dscores, q, optimize=True)
        flat = x.reshape(-1, d)
        self.store.grads[f"{self.name}.Wq"] += flat.T @ f32(dq).reshape(-1, d)
        self.store.grads[f"{self.name}.Ws"] += flat.T @ f32(ds).reshape(-1, d)
        self.store.grads[f"{self.name}.Wt"] += flat.T @ f32(dt).reshape(-1, d)
        dx = dsum \
            + (f32(dq).reshape(B * n, d) @ self.Wq.T).reshape(B, n, d) \
            + (f32(ds).reshape(B * n, d) @ self.Ws.T).reshape(B, n, d) \
            + (f32(dt).reshape(B * n, d) @ self.Wt.T).reshape(B, n, d)
        return dx


class EncoderLayer:
    """Attention sublayer followed by a feed-forward sublayer, each with a
    residual connection and layer norm."""

    def __init__(self, store: ParamStore, name: str, d_k: int, n_head: int,
                 d_ff: int, rng: np.random.Generator):
        self.attn = AttentionLayer(store, f"{name}.attn", d_k, n_head, rng)
        self.ff1 = Linear(store, f"{name}.ff1", d_k, d_ff, rng)
        self.act = LeakyReLU(0.01)
        self.ff2 = Linear(store, f"{name}.ff2", d_ff, d_k, rng)
        self.norm = LayerNorm(store, f"{name}.norm", d_k)

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = self.attn.forward(x)
        ff = self.ff2.forward(self.act.forward(self.ff1.forward(h)))
        return self.norm.forward(h + ff)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dsum = self.norm.backward(dy)
        dff = self.ff1.backward(self.act.backward(self.ff2.backward(dsum)))
        return self.attn.backward(dsum + dff)


class AttentionEncoder:
    """Stack of encoder layers plus the view-axis reduction to one meta-view
    feature. depth=0 reproduces plain mean pooling exactly."""

    def __init__(self, store: ParamStore, name: str, d_k: int,
                 n_head: int = 4, depth: int = 2, d_ff: int = 128,
                 rng: np.random.Generator | None = None,
                 reduction: str = "mean"):
        if rng is None:
            rng = np.random.default_rng(0)
        if reduction != "mean":
            raise ValueError(f"unsupported reduction {reduction!r}")
        self.d_k = d_k
        self.layers = [EncoderLayer(store, f"{name}.layer{i}", d_k, n_head, d_ff, rng)
                       for i in range(depth)]
        self._n_views = None

    @property
    def depth(self) -> int:
        return len(self.layers)

    def encode(self, stack: np.ndarray) -> np.ndarray:
        x = f32(stack)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        for layer in self.layers:
            x = layer.forward(x)
        self._n_views = x.shape[1]
        return x[0] if squeeze else x

    def forward(self, stack: np.ndarray) -> np.ndarray:
        """encode_and_reduce: L attention layers, then mean over views."""
        return mean_pool(self.encode(stack))

    def backward(self, dreduced: np.ndarray) -> np.ndarray:
        """Gradient wrt the input stack given gradient of the reduced output."""
        d = f32(dreduced)
        squeeze = d.ndim == 1
        if squeeze:
            d = d[None]
        n = self._n_views
        dx = np.repeat(d[:, None, :] / np.asarray(n, dtype=d.dtype), n, axis=1)
        for layer in reversed(self.layers):
            dx = layer.backward(dx)
        return dx[0] if squeeze else dx


def encode_and_reduce(encoder: AttentionEncoder, stack: np.ndarray) -> np.ndarray:
    return encoder.forward(stack)
