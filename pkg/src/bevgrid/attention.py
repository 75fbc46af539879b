"""Deformable attention: bilinear sampling at predicted offsets with convex weights.

The batched kernel works on "rows": each row samples one of several value maps
around one reference point, with per-head offsets and weights. Everything
here has a hand-written backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sampling import bilinear_corners


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class DeformAttnParams:
    """Per-head value/output projections plus the offset and weight predictors.

    W_value (N_head, C, d) projects features to each head; W_out (N_head, d, C)
    maps head outputs back. Offsets are laid out (N_head, N_key, 2) with
    (du, dv) last, in the sampled map's own units.
    """

    W_value: np.ndarray
    W_out: np.ndarray
    W_off: np.ndarray
    b_off: np.ndarray
    W_att: np.ndarray
    b_att: np.ndarray

    @property
    def n_heads(self) -> int:
        return self.W_value.shape[0]

    @property
    def head_dim(self) -> int:
        return self.W_value.shape[2]

    @property
    def channels(self) -> int:
        return self.W_value.shape[1]

    @property
    def n_keys(self) -> int:
        return self.b_att.shape[0] // self.n_heads

    @property
    def query_dim(self) -> int:
        return self.W_off.shape[0]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in ("W_value", "W_out", "W_off", "b_off", "W_att", "b_att")}

    @classmethod
    def from_dict(cls, d, prefix: str = "") -> "DeformAttnParams":
        return cls(**{k: d[prefix + k] for k in ("W_value", "W_out", "W_off", "b_off", "W_att", "b_att")})


def ring_offsets(n_heads: int, n_keys: int, radius: float = 1.0, n_sets: int = 1) -> np.ndarray:
    """Offset biases on a ring around the reference, rotating across heads and keys.

    Shape (n_sets * n_heads * n_keys * 2,).
    """
    total = n_heads * n_keys
    idx = np.arange(total)
    angles = 2 * math.pi * idx / total
    ring = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    ring = ring.reshape(n_heads, n_keys, 2)
    return np.tile(ring[None], (n_sets, 1, 1, 1)).ravel()


def init_deform_params(
    rng: np.random.Generator,
    channels: int,
    n_heads: int,
    n_keys: int = 4,
    query_dim: int | None = None,
    n_sets: int = 1,
) -> dict[str, np.ndarray]:
    """Predictor weights zero, offset biases on a unit ring, logit biases zero."""
    if channels % n_heads:
        raise ValueError(f"channels {channels} not divisible by heads {n_heads}")
    d = channels // n_heads
    query_dim = channels if query_dim is None else query_dim
    scale = 1.0 / math.sqrt(channels)
    return {
        "W_value": rng.normal(0.0, scale, size=(n_heads, channels, d)),
        "W_out": rng.normal(0.0, 1.0 / math.sqrt(d * n_heads), size=(n_heads, d, channels)),
        "W_off": np.zeros((query_dim, n_sets * n_heads * n_keys * 2)),
        "b_off": ring_offsets(n_heads, n_keys, 1.0, n_sets),
        "W_att": np.zeros((query_dim, n_sets * n_heads * n_keys)),
        "b_att": np.zeros(n_sets * n_heads * n_keys),
    }


# ---------------------------------------------------------------------------
# Small differentiable pieces
# ---------------------------------------------------------------------------


def normalize_weights(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis (keys)."""
    z = np.asarray(logits, float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def normalize_weights_backward(weights: np.ndarray, dweights: np.ndarray) -> np.ndarray:
    return weights * (dweights - (dweights * weights).sum(axis=-1, keepdims=True))


def bilinear_sample(fmap: np.ndarray, pt) -> np.ndarray:
    """Zero-padded bilinear sample of an (h, w, C) map at fractional (u, v)."""
    h, w = fmap.shape[:2]
    u, v = float(pt[0]), float(pt[1])
    rows, cols, weights, _ = bilinear_corners(np.array(u), np.array(v), h, w)
    return weights @ fmap[rows, cols]


# ---------------------------------------------------------------------------
# Row kernel
# ---------------------------------------------------------------------------


def sample_rows(values: np.ndarray, map_idx: np.ndarray, loc: np.ndarray, attn: np.ndarray):
    """Weighted multi-head bilinear sampling.

    values: (M, h, w, N_head, d) per-head projected maps
    map_idx: (R,) which map each row samples
    loc: (R, N_head, K, 2) absolute sampling points (u=col, v=row)
    attn: (R, N_head, K) convex weights
    Returns ``out`` (R, N_head, d) and a cache for :func:`sample_rows_backward`.
    """
    M, h, w, nh, d = values.shape
    R, _, K, _ = loc.shape
    rows, cols, bw, valid = bilinear_corners(loc[..., 0], loc[..., 1], h, w)  # (R, nh, K, 4)
    head = np.arange(nh)[None, :, None, None]
    flat = ((map_idx[:, None, None, None] * h + rows) * w + cols) * nh + head
    corners = values.reshape(-1, d)[flat]  # (R, nh, K, 4, d)
    samples = np.einsum("rhkc,rhkcd->rhkd", bw, corners)
    out = np.einsum("rhk,rhkd->rhd", attn, samples)
    cache = (values.shape, flat, bw, valid, loc, corners, samples, attn)
    return out, cache


def sample_rows_backward(cache, dout: np.ndarray):
    """Gradients w.r.t. values, sampling points and weights."""
    vshape, flat, bw, valid, loc, corners, samples, attn = cache
    d = vshape[-1]
    dattn = np.einsum("rhkd,rhd->rhk", samples, dout)
    dsamples = attn[..., None] * dout[:, :, None, :]  # (R, nh, K, d)
    dcorner_w = np.einsum("rhkcd,rhkd->rhkc", corners, dsamples)
    # out-of-map corners hold clipped indices; keep them out of the location gradient
    u = loc[..., 0]
    v = loc[..., 1]
    fx = u - np.floor(u)
    fy = v - np.floor(v)
    g = np.where(valid, dcorner_w, 0.0)
    du = (g[..., 1] - g[..., 0]) * (1 - fy) + (g[..., 3] - g[..., 2]) * fy
    dv = (g[..., 2] - g[..., 0]) * (1 - fx) + (g[..., 3] - g[..., 1]) * fx
    dloc = np.stack([du, dv], axis=-1)
    contrib = bw[..., None] * dsamples[..., None, :]  # (R, nh, K, 4, d)
    n_flat = int(np.prod(vshape[:-1]))
    # one scatter over (row, channel) pairs
    idx = (flat.reshape(-1, 1) * d + np.arange(d)).ravel()
    dvalues = np.bincount(idx, weights=contrib.ravel(), minlength=n_flat * d)
    return dvalues.reshape(vshape), dloc, dattn


# ---------------------------------------------------------------------------
# Deformable attention over a batch of queries sharing one map
# ---------------------------------------------------------------------------


def project_values(fmap: np.ndarray, W_value: np.ndarray) -> np.ndarray:
    """(..., C) features -> (..., N_head, d)."""
    return np.einsum("...c,hcd->...hd", fmap, W_value)


def predict_offsets_weights(query_input: np.ndarray, p: dict, n_heads: int, n_keys: int, n_sets: int = 1):
    """Affine offset and weight predictors; returns offsets (Nq, S, nh, K, 2), weights (Nq, S, nh, K)."""
    nq = query_input.shape[0]
    off = (query_input @ p["W_off"] + p["b_off"]).reshape(nq, n_sets, n_heads, n_keys, 2)
    logits = (query_input @ p["W_att"] + p["b_att"]).reshape(nq, n_sets, n_heads, n_keys)
    return off, normalize_weights(logits)


def deform_attn_batch(query_input: np.ndarray, refs: np.ndarray, fmap: np.ndarray, p: dict):
    """Deformable attention for Nq queries sharing one (h, w, C) map.

    query_input (Nq, Din) feeds the predictors, refs (Nq, 2) are reference points
    in map units. Returns (Nq, C) and a cache.
    """
    nh, C, d = p["W_value"].shape
    K = p["b_att"].shape[0] // nh
    if query_input.shape[1] != p["W_off"].shape[0]:
        raise ValueError(f"query input dim {query_input.shape[1]} != predictor dim {p['W_off'].shape[0]}")
    if fmap.shape[-1] != C:
        raise ValueError(f"feature channels {fmap.shape[-1]} != {C}")
    off, A = predict_offsets_weights(query_input, p, nh, K)
    off, A = off[:, 0], A[:, 0]
    values = project_values(fmap, p["W_value"])[None]
    loc = refs[:, None, None, :] + off
    heads, scache = sample_rows(values, np.zeros(len(refs), dtype=np.int64), loc, A)
    out = np.einsum("qhd,hdc->qc", heads, p["W_out"])
    return out, (query_input, fmap, A, heads, scache)


def deform_attn_batch_backward(p: dict, cache, dout: np.ndarray):
    """Returns (grads dict, d_query_input, d_fmap)."""
    query_input, fmap, A, heads, scache = cache
    nh, C, d = p["W_value"].shape
    grads = {"W_out": np.einsum("qhd,qc->hdc", heads, dout)}
    dheads = np.einsum("qc,hdc->qhd", dout, p["W_out"])
    dvalues, dloc, dA = sample_rows_backward(scache, dheads)
    dvalues = dvalues[0]
    grads["W_value"] = np.einsum("nc,nhd->hcd", fmap.reshape(-1, C), dvalues.reshape(-1, nh, d))
    dfmap = np.einsum("...hd,hcd->...c", dvalues, p["W_value"])
    doff = dloc.reshape(len(query_input), -1)
    dlogits = normalize_weights_backward(A, dA).reshape(len(query_input), -1)
    grads["W_off"] = query_input.T @ doff
    grads["b_off"] = doff.sum(0)
    grads["W_att"] = query_input.T @ dlogits
    grads["b_att"] = dlogits.sum(0)
    dq = doff @ p["W_off"].T + dlogits @ p["W_att"].T
    return grads, dq, dfmap


def deform_attn(query, ref, fmap, params, query_input=None) -> np.ndarray:
    """Single-query deformable attention (one reference point, one map)."""
    p = params.as_dict() if isinstance(params, DeformAttnParams) else params
    qi = np.asarray(query if query_input is None else query_input, float)[None]
    out, _ = deform_attn_batch(qi, np.asarray(ref, float)[None], np.asarray(fmap, float), p)
    return out[0]


def deform_attn_grad(query, ref, fmap, params, upstream, query_input=None):
    """Gradients of <upstream, deform_attn(...)>.

    Returns a dict with every parameter name plus ``query_input`` and ``map``.
    """
    p = params.as_dict() if isinstance(params, DeformAttnParams) else params
    qi = np.asarray(query if query_input is None else query_input, float)[None]
    _, cache = deform_attn_batch(qi, np.asarray(ref, float)[None], np.asarray(fmap, float), p)
    grads, dq, dmap = deform_attn_batch_backward(p, cache, np.asarray(upstream, float)[None])
    grads["query_input"] = dq[0]
    grads["map"] = dmap
    return grads
