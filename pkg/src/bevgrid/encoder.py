"""Spatiotemporal BEV encoder with hand-written backward passes.

Parameters live in a flat ``dict[str, np.ndarray]`` keyed by dotted names
(``layers.0.tsa.W_off``); gradients use the same keys. Forward functions
return ``(output, cache)`` and backward functions accumulate into a gradient
dict and return input gradients.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import (
    init_deform_params,
    normalize_weights_backward,
    predict_offsets_weights,
    project_values,
    sample_rows,
    sample_rows_backward,
)
from .geometry import (
    AnchorHeights,
    BevGridSpec,
    BevState,
    CameraRig,
    EgoPose,
    align_features,
    pillar_projections,
)
from .layers import conv2d, conv2d_backward, gelu, gelu_backward, layer_norm, layer_norm_backward, softmax

STRIDE = 8
SCA_MODES = ("local", "points", "global")


@dataclass
class EncoderConfig:
    grid: BevGridSpec = field(default_factory=lambda: BevGridSpec(32, 32, 1.0))
    channels: int = 32
    n_layers: int = 6
    n_heads: int = 4
    n_keys: int = 4
    anchors: AnchorHeights = field(default_factory=AnchorHeights)
    sca_mode: str = "local"
    tsa_concat_offsets: bool = True
    tsa_reduce: str = "mean"
    ffn_hidden: int = 64
    featurizer_channels: tuple[int, int] = (16, 32)
    image_shape: tuple[int, int] = (96, 128)
    n_views: int = 4
    n_classes: int = 4

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.sca_mode not in SCA_MODES:
            raise ValueError(f"sca_mode must be one of {SCA_MODES}, got {self.sca_mode!r}")
        if self.tsa_reduce not in ("mean", "sum"):
            raise ValueError(f"tsa_reduce must be 'mean' or 'sum', got {self.tsa_reduce!r}")
        if self.channels % self.n_heads:
            raise ValueError(f"channels {self.channels} not divisible by n_heads {self.n_heads}")
        h, w = self.image_shape
        if h % STRIDE or w % STRIDE:
            raise ValueError(f"image dims must be divisible by {STRIDE}, got {self.image_shape}")

    @property
    def feature_shape(self) -> tuple[int, int]:
        return (self.image_shape[0] // STRIDE, self.image_shape[1] // STRIDE)

    @property
    def head_dim(self) -> int:
        return self.channels // self.n_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = {"H": self.grid.H, "W": self.grid.W, "s": self.grid.s, "origin_cell": list(self.grid.origin_cell)}
        d["anchors"] = list(self.anchors.z_levels)
        d["featurizer_channels"] = list(self.featurizer_channels)
        d["image_shape"] = list(self.image_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        g = d.pop("grid")
        grid = BevGridSpec(g["H"], g["W"], g["s"], tuple(g["origin_cell"]) if g.get("origin_cell") else None)
        anchors = AnchorHeights(tuple(d.pop("anchors")))
        return cls(
            grid=grid,
            anchors=anchors,
            featurizer_channels=tuple(d.pop("featurizer_channels")),
            image_shape=tuple(d.pop("image_shape")),
            **d,
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def sinusoidal_embedding(H: int, W: int, C: int) -> np.ndarray:
    """Smooth (H, W, C) position code: half the channels encode x, half y.

    Used only as the starting point of the learnable positional embedding, so
    that nearby cells start with similar queries.
    """
    half = C // 2
    n_freq = max(1, half // 2)
    freqs = np.pi * np.geomspace(1.0, max(H, W), n_freq) / max(H, W)
    ys, xs = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), indexing="ij")
    parts = []
    for coord, width in ((xs, half), (ys, C - half)):
        ang = coord[..., None] * freqs
        enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
        parts.append(np.resize(enc.transpose(2, 0, 1), (width, H, W)).transpose(1, 2, 0))
    return np.ascontiguousarray(np.concatenate(parts, axis=-1))


def init_params(cfg: EncoderConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    C, H, W = cfg.channels, cfg.grid.H, cfg.grid.W
    P: dict[str, np.ndarray] = {
        "bev_query": rng.normal(0.0, 0.02, size=(H, W, C)),
        "pos_embed": sinusoidal_embedding(H, W, C),
    }
    widths = [3, *cfg.featurizer_channels, C]
    for i in range(3):
        cin, cout = widths[i], widths[i + 1]
        P[f"feat.conv{i}.w"] = rng.normal(0.0, 1.0 / math.sqrt(16 * cin), size=(4, 4, cin, cout))
        P[f"feat.conv{i}.b"] = np.zeros(cout)
    tsa_in = 2 * C if cfg.tsa_concat_offsets else C
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        for k, v in init_deform_params(rng, C, cfg.n_heads, cfg.n_keys, tsa_in, n_sets=2).items():
            P[pre + "tsa." + k] = v
        if cfg.sca_mode == "local":
            for k, v in init_deform_params(rng, C, cfg.n_heads, cfg.n_keys, C).items():
                P[pre + "sca." + k] = v
        elif cfg.sca_mode == "points":
            dp = init_deform_params(rng, C, cfg.n_heads, 1, C)
            P[pre + "sca.W_value"] = dp["W_value"]
            P[pre + "sca.W_out"] = dp["W_out"]
        else:
            fh, fw = cfg.feature_shape
            s = 1.0 / math.sqrt(C)
            P[pre + "sca.W_q"] = rng.normal(0.0, s, size=(C, C))
            P[pre + "sca.W_k"] = rng.normal(0.0, s, size=(C, C))
            P[pre + "sca.W_value"] = rng.normal(0.0, s, size=(cfg.n_heads, C, cfg.head_dim))
            P[pre + "sca.W_out"] = rng.normal(0.0, s, size=(cfg.n_heads, cfg.head_dim, C))
            P[pre + "sca.key_pos"] = rng.normal(0.0, 0.5, size=(cfg.n_views, fh, fw, C))
        P[pre + "ffn.W1"] = rng.normal(0.0, 1.0 / math.sqrt(C), size=(C, cfg.ffn_hidden))
        P[pre + "ffn.b1"] = np.zeros(cfg.ffn_hidden)
        P[pre + "ffn.W2"] = rng.normal(0.0, 1.0 / math.sqrt(cfg.ffn_hidden), size=(cfg.ffn_hidden, C))
        P[pre + "ffn.b2"] = np.zeros(C)
        for n in (1, 2, 3):
            P[pre + f"norm{n}.g"] = np.ones(C)
            P[pre + f"norm{n}.b"] = np.zeros(C)
    P["head.seg.W"] = rng.normal(0.0, 0.05, size=(C, cfg.n_classes))
    P["head.seg.b"] = np.zeros(cfg.n_classes)
    P["head.ctr.W"] = rng.normal(0.0, 0.05, size=(C, 5))
    P["head.ctr.b"] = np.array([-2.0, 0.0, 0.0, 0.0, 0.0])
    return P


def zeros_like_params(P: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in P.items()}


# ---------------------------------------------------------------------------
# Featurizer: three 4x4 stride-2 convolutions, each followed by GELU
# ---------------------------------------------------------------------------


def featurize(P: dict, images: np.ndarray):
    """(N, h, w, 3) images -> (N, h/8, w/8, C) features and a cache."""
    x = np.asarray(images, float)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1] % STRIDE or x.shape[2] % STRIDE:
        raise ValueError(f"image dims must be divisible by {STRIDE}, got {x.shape[1:3]}")
    caches = []
    for i in range(3):
        z, cc = conv2d(x, P[f"feat.conv{i}.w"], P[f"feat.conv{i}.b"])
        caches.append((cc, z))
        x = gelu(z)
    return x, caches


def featurize_backward(P: dict, caches, dout: np.ndarray, grads: dict):
    dx = dout
    for i in reversed(range(3)):
        cc, z = caches[i]
        dz = gelu_backward(z, dx)
        dx, dw, db = conv2d_backward(cc, P[f"feat.conv{i}.w"], dz)
        grads[f"feat.conv{i}.w"] += dw
        grads[f"feat.conv{i}.b"] += db
    return dx


def prepare_images(images) -> np.ndarray:
    """uint8 RGB -> float centered on zero."""
    return np.asarray(images, float) / 255.0 - 0.5


# ---------------------------------------------------------------------------
# Spatial reference points
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class SpatialRefs:
    """Flattened hit table: one row per (query, hit view, hit anchor)."""

    q_idx: np.ndarray  # (R,)
    view_idx: np.ndarray  # (R,)
    ref: np.ndarray  # (R, 2) in feature-map units
    scale: np.ndarray  # (R,) 1 / |V_hit(q)|
    view_hit: np.ndarray  # (Nq, N_view) bool


def pixel_to_feature(uv: np.ndarray, stride: int = STRIDE) -> np.ndarray:
    """Pixel coords (image spans [0, width]) to feature-cell coords (cell i centered at 8i + 4)."""
    return uv / stride - 0.5


def build_spatial_refs(grid: BevGridSpec, rig: CameraRig, anchors: AnchorHeights, stride: int = STRIDE) -> SpatialRefs:
    uv, hit = pillar_projections(grid, rig, anchors)  # (V, Nq, Nref, 2), (V, Nq, Nref)
    view_hit = hit.any(axis=2).T  # (Nq, V)
    n_hit = view_hit.sum(axis=1)
    # rows ordered by query, then view, then anchor
    hq = hit.transpose(1, 0, 2)  # (Nq, V, Nref)
    q_idx, v_idx, r_idx = np.nonzero(hq)
    ref = pixel_to_feature(uv[v_idx, q_idx, r_idx], stride)
    scale = 1.0 / n_hit[q_idx]
    return SpatialRefs(q_idx, v_idx, ref, scale.astype(float), view_hit)


def cell_refs(grid: BevGridSpec) -> np.ndarray:
    xs, ys = grid.cell_grid()
    return np.column_stack([xs.ravel(), ys.ravel()])


# ---------------------------------------------------------------------------
# Temporal self-attention
# ---------------------------------------------------------------------------


def tsa_forward(P: dict, pre: str, Q: np.ndarray, hist: np.ndarray, cfg: EncoderConfig):
    """Q, hist: (Nq, C). Two branches (current queries, aligned history), each a
    deformable attention at the query's own cell with its own offsets/weights."""
    p = {k: P[pre + k] for k in ("W_value", "W_out", "W_off", "b_off", "W_att", "b_att")}
    nh, K = cfg.n_heads, cfg.n_keys
    H, W = cfg.grid.shape
    nq, C = Q.shape
    d = C // nh
    xin = np.concatenate([Q, hist], axis=1) if cfg.tsa_concat_offsets else Q
    off, A = predict_offsets_weights(xin, p, nh, K, n_sets=2)
    refs = cell_refs(cfg.grid)
    values = np.stack([project_values(Q, p["W_value"]), project_values(hist, p["W_value"])])
    values = values.reshape(2, H, W, nh, d)
    loc = (refs[:, None, None, None, :] + off).transpose(1, 0, 2, 3, 4).reshape(2 * nq, nh, K, 2)
    attn = A.transpose(1, 0, 2, 3).reshape(2 * nq, nh, K)
    map_idx = np.repeat(np.arange(2), nq)
    rows, scache = sample_rows(values, map_idx, loc, attn)
    scale = 0.5 if cfg.tsa_reduce == "mean" else 1.0
    agg = scale * rows.reshape(2, nq, nh, d).sum(0)
    out = np.einsum("qhd,hdc->qc", agg, p["W_out"])
    return out, (xin, Q, hist, A, agg, scache, scale)


def tsa_backward(P: dict, pre: str, cache, dout: np.ndarray, cfg: EncoderConfig, grads: dict):
    xin, Q, hist, A, agg, scache, scale = cache
    nq, C = Q.shape
    nh = cfg.n_heads
    d = C // nh
    W_out = P[pre + "W_out"]
    W_value = P[pre + "W_value"]
    grads[pre + "W_out"] += np.einsum("qhd,qc->hdc", agg, dout)
    dagg = np.einsum("qc,hdc->qhd", dout, W_out) * scale
    drows = np.concatenate([dagg, dagg])
    dvalues, dloc, dattn = sample_rows_backward(scache, drows)
    dvalues = dvalues.reshape(2, nq, nh, d)
    grads[pre + "W_value"] += np.einsum("qc,qhd->hcd", Q, dvalues[0]) + np.einsum("qc,qhd->hcd", hist, dvalues[1])
    dQ = np.einsum("qhd,hcd->qc", dvalues[0], W_value)
    doff = dloc.reshape(2, nq, nh, -1, 2).transpose(1, 0, 2, 3, 4).reshape(nq, -1)
    dA = dattn.reshape(2, nq, nh, -1).transpose(1, 0, 2, 3)
    dlogits = normalize_weights_backward(A, dA).reshape(nq, -1)
    grads[pre + "W_off"] += xin.T @ doff
    grads[pre + "b_off"] += doff.sum(0)
    grads[pre + "W_att"] += xin.T @ dlogits
    grads[pre + "b_att"] += dlogits.sum(0)
    dxin = doff @ P[pre + "W_off"].T + dlogits @ P[pre + "W_att"].T
    dQ += dxin[:, :C]
    return dQ


# ---------------------------------------------------------------------------
# Spatial cross-attention
# ---------------------------------------------------------------------------


def _scatter_rows(q_idx: np.ndarray, rows: np.ndarray, nq: int) -> np.ndarray:
    out = np.zeros((nq,) + rows.shape[1:])
    np.add.at(out, q_idx, rows)
    return out


def sca_forward(P: dict, pre: str, X: np.ndarray, feats: np.ndarray, refs: SpatialRefs, cfg: EncoderConfig):
    """X (Nq, C) queries, feats (N_view, h, w, C)."""
    if feats.shape[0] != refs.view_hit.shape[1]:
        raise ValueError(f"got {feats.shape[0]} feature maps for {refs.view_hit.shape[1]} views")
    if cfg.sca_mode == "global":
        return _sca_global_forward(P, pre, X, feats, refs, cfg)
    nh = cfg.n_heads
    nq, C = X.shape
    d = C // nh
    values = project_values(feats, P[pre + "W_value"])  # (V, h, w, nh, d)
    R = len(refs.q_idx)
    if cfg.sca_mode == "local":
        p = {k: P[pre + k] for k in ("W_off", "b_off", "W_att", "b_att")}
        off, A = predict_offsets_weights(X, p, nh, cfg.n_keys)
        off, A = off[:, 0], A[:, 0]
        loc = refs.ref[:, None, None, :] + off[refs.q_idx]
        attn = A[refs.q_idx]
    else:
        off = A = None
        loc = np.broadcast_to(refs.ref[:, None, None, :], (R, nh, 1, 2)).copy()
        attn = np.ones((R, nh, 1))
    rows, scache = sample_rows(values, refs.view_idx, loc, attn)
    agg = _scatter_rows(refs.q_idx, rows * refs.scale[:, None, None], nq)
    out = np.einsum("qhd,hdc->qc", agg, P[pre + "W_out"])
    return out, (X, feats, A, agg, scache)


def sca_backward(P: dict, pre: str, cache, dout: np.ndarray, refs: SpatialRefs, cfg: EncoderConfig, grads: dict):
    """Returns (dX, dfeats)."""
    if cfg.sca_mode == "global":
        return _sca_global_backward(P, pre, cache, dout, refs, cfg, grads)
    X, feats, A, agg, scache = cache
    nq, C = X.shape
    nh = cfg.n_heads
    grads[pre + "W_out"] += np.einsum("qhd,qc->hdc", agg, dout)
    dagg = np.einsum("qc,hdc->qhd", dout, P[pre + "W_out"])
    drows = dagg[refs.q_idx] * refs.scale[:, None, None]
    dvalues, dloc, dattn = sample_rows_backward(scache, drows)
    d = C // nh
    grads[pre + "W_value"] += np.einsum("nc,nhd->hcd", feats.reshape(-1, C), dvalues.reshape(-1, nh, d))
    dfeats = np.einsum("...hd,hcd->...c", dvalues, P[pre + "W_value"])
    dX = np.zeros_like(X)
    if cfg.sca_mode == "local":
        doff = _scatter_rows(refs.q_idx, dloc, nq).reshape(nq, -1)
        dA = _scatter_rows(refs.q_idx, dattn, nq)
        dlogits = normalize_weights_backward(A, dA).reshape(nq, -1)
        grads[pre + "W_off"] += X.T @ doff
        grads[pre + "b_off"] += doff.sum(0)
        grads[pre + "W_att"] += X.T @ dlogits
        grads[pre + "b_att"] += dlogits.sum(0)
        dX = doff @ P[pre + "W_off"].T + dlogits @ P[pre + "W_att"].T
    return dX, dfeats


def _sca_global_forward(P, pre, X, feats, refs: SpatialRefs, cfg: EncoderConfig):
    """Vanilla multi-head attention over the flattened features of hit views only."""
    nh = cfg.n_heads
    nq, C = X.shape
    d = C // nh
    V, fh, fw, _ = feats.shape
    keys_in = (feats + P[pre + "key_pos"]).reshape(-1, C)
    q = (X @ P[pre + "W_q"]).reshape(nq, nh, d)
    k = (keys_in @ P[pre + "W_k"]).reshape(-1, nh, d)
    v = project_values(feats.reshape(-1, C), P[pre + "W_value"])  # (Nk, nh, d)
    key_view = np.repeat(np.arange(V), fh * fw)
    mask = refs.view_hit[:, key_view]  # (Nq, Nk)
    has_hit = mask.any(axis=1)
    logits = np.einsum("qhd,khd->qhk", q, k) / math.sqrt(d)
    logits = np.where(mask[:, None, :], logits, -np.inf)
    logits[~has_hit] = 0.0
    w = softmax(logits, axis=-1)
    w[~has_hit] = 0.0
    heads = np.einsum("qhk,khd->qhd", w, v)
    out = np.einsum("qhd,hdc->qc", heads, P[pre + "W_out"])
    return out, (X, feats, keys_in, q, k, v, w, heads)


def _sca_global_backward(P, pre, cache, dout, refs, cfg, grads):
    X, feats, keys_in, q, k, v, w, heads = cache
    nh = cfg.n_heads
    nq, C = X.shape
    d = C // nh
    grads[pre + "W_out"] += np.einsum("qhd,qc->hdc", heads, dout)
    dheads = np.einsum("qc,hdc->qhd", dout, P[pre + "W_out"])
    dw = np.einsum("qhd,khd->qhk", dheads, v)
    dv = np.einsum("qhk,qhd->khd", w, dheads)
    dlogits = w * (dw - (dw * w).sum(axis=-1, keepdims=True)) / math.sqrt(d)
    dq = np.einsum("qhk,khd->qhd", dlogits, k).reshape(nq, C)
    dk = np.einsum("qhk,qhd->khd", dlogits, q).reshape(-1, C)
    flat_feats = feats.reshape(-1, C)
    grads[pre + "W_q"] += X.T @ dq
    grads[pre + "W_k"] += keys_in.T @ dk
    grads[pre + "W_value"] += np.einsum("nc,nhd->hcd", flat_feats, dv)
    dkeys_in = dk @ P[pre + "W_k"].T
    grads[pre + "key_pos"] += dkeys_in.reshape(feats.shape)
    dfeats = dkeys_in + np.einsum("nhd,hcd->nc", dv, P[pre + "W_value"])
    dX = dq @ P[pre + "W_q"].T
    return dX, dfeats.reshape(feats.shape)


def global_attention_weights(P, pre, X, feats, refs, cfg) -> np.ndarray:
    """(Nq, N_head, N_view*h*w) attention weights of global-mode SCA."""
    _, cache = _sca_global_forward(P, pre, X, feats, refs, cfg)
    return cache[6]


# ---------------------------------------------------------------------------
# Encoder layer and stack
# ---------------------------------------------------------------------------


def ffn_forward(P, pre, x):
    h = x @ P[pre + "W1"] + P[pre + "b1"]
    a = gelu(h)
    return a @ P[pre + "W2"] + P[pre + "b2"], (x, h, a)


def ffn_backward(P, pre, cache, dout, grads):
    x, h, a = cache
    grads[pre + "W2"] += a.T @ dout
    grads[pre + "b2"] += dout.sum(0)
    dh = gelu_backward(h, dout @ P[pre + "W2"].T)
    grads[pre + "W1"] += x.T @ dh
    grads[pre + "b1"] += dh.sum(0)
    return dh @ P[pre + "W1"].T


def encoder_layer_forward(P, l: int, Q, hist, feats, refs: SpatialRefs, cfg: EncoderConfig):
    """Post-norm layer: TSA -> add & norm -> SCA -> add & norm -> FFN -> add & norm."""
    pre = f"layers.{l}."
    t, c_tsa = tsa_forward(P, pre + "tsa.", Q, hist, cfg)
    x1, n1 = layer_norm(Q + t, P[pre + "norm1.g"], P[pre + "norm1.b"])
    s, c_sca = sca_forward(P, pre + "sca.", x1, feats, refs, cfg)
    x2, n2 = layer_norm(x1 + s, P[pre + "norm2.g"], P[pre + "norm2.b"])
    f, c_ffn = ffn_forward(P, pre + "ffn.", x2)
    x3, n3 = layer_norm(x2 + f, P[pre + "norm3.g"], P[pre + "norm3.b"])
    return x3, (c_tsa, n1, c_sca, n2, c_ffn, n3)


def encoder_layer_backward(P, l: int, cache, dout, refs: SpatialRefs, cfg: EncoderConfig, grads: dict):
    """Returns (dQ, dfeats)."""
    pre = f"layers.{l}."
    c_tsa, n1, c_sca, n2, c_ffn, n3 = cache
    dx, dg, db = layer_norm_backward(n3, P[pre + "norm3.g"], dout)
    grads[pre + "norm3.g"] += dg
    grads[pre + "norm3.b"] += db
    dx2 = dx + ffn_backward(P, pre + "ffn.", c_ffn, dx, grads)
    dx, dg, db = layer_norm_backward(n2, P[pre + "norm2.g"], dx2)
    grads[pre + "norm2.g"] += dg
    grads[pre + "norm2.b"] += db
    dsx, dfeats = sca_backward(P, pre + "sca.", c_sca, dx, refs, cfg, grads)
    dx1 = dx + dsx
    dx, dg, db = layer_norm_backward(n1, P[pre + "norm1.g"], dx1)
    grads[pre + "norm1.g"] += dg
    grads[pre + "norm1.b"] += db
    dQ = dx + tsa_backward(P, pre + "tsa.", c_tsa, dx, cfg, grads)
    return dQ, dfeats


def init_bev_queries(P: dict, cfg: EncoderConfig) -> BevState:
    return BevState(P["bev_query"] + P["pos_embed"])


def initial_queries(P: dict, cfg: EncoderConfig) -> np.ndarray:
    return (P["bev_query"] + P["pos_embed"]).reshape(-1, cfg.channels)


def encode_forward(P, cfg: EncoderConfig, images, refs: SpatialRefs, hist: np.ndarray | None):
    """Featurize and run the layer stack. ``hist`` is the aligned previous BEV
    (Nq, C) or None for the first frame, in which case the entry queries stand
    in for it. History is always treated as a constant.

    Returns (B (Nq, C), cache).
    """
    feats, fcache = featurize(P, images)
    if feats.shape[0] != cfg.n_views:
        raise ValueError(f"expected {cfg.n_views} views, got {feats.shape[0]}")
    Q = initial_queries(P, cfg)
    hist = Q.copy() if hist is None else np.asarray(hist, float).reshape(Q.shape)
    caches = []
    x = Q
    for l in range(cfg.n_layers):
        x, c = encoder_layer_forward(P, l, x, hist, feats, refs, cfg)
        caches.append(c)
    return x, (fcache, caches)


def encode_backward(P, cfg: EncoderConfig, cache, dB: np.ndarray, refs: SpatialRefs, grads: dict):
    fcache, caches = cache
    dx = dB
    dfeats_total = None
    for l in reversed(range(cfg.n_layers)):
        dx, dfeats = encoder_layer_backward(P, l, caches[l], dx, refs, cfg, grads)
        dfeats_total = dfeats if dfeats_total is None else dfeats_total + dfeats
    dQ = dx.reshape(cfg.grid.H, cfg.grid.W, cfg.channels)
    grads["bev_query"] += dQ
    grads["pos_embed"] += dQ
    featurize_backward(P, fcache, dfeats_total, grads)


def prepare_history(prev: BevState | None, pose: EgoPose, cfg: EncoderConfig, align: bool = True):
    """Aligned previous BEV features as (Nq, C), or None on the first frame."""
    if prev is None:
        return None
    feats = prev.features
    if feats.shape != (cfg.grid.H, cfg.grid.W, cfg.channels):
        raise ValueError(f"history shape {feats.shape} does not match the model grid")
    if align:
        feats = align_features(feats, prev.pose, pose, cfg.grid)
    return feats.reshape(-1, cfg.channels)


def encode_frame(
    images,
    rig: CameraRig,
    pose: EgoPose,
    prev: BevState | None,
    P: dict,
    cfg: EncoderConfig,
    timestamp: float = 0.0,
    refs: SpatialRefs | None = None,
    align: bool = True,
) -> BevState:
    if len(images) != len(rig):
        raise ValueError(f"got {len(images)} images for {len(rig)} views")
    if refs is None:
        refs = build_spatial_refs(cfg.grid, rig, cfg.anchors)
    images = np.asarray(images)
    if images.dtype == np.uint8:
        images = prepare_images(images)
    hist = prepare_history(prev, pose, cfg, align)
    B, _ = encode_forward(P, cfg, images, refs, hist)
    return BevState(B.reshape(cfg.grid.H, cfg.grid.W, cfg.channels), timestamp, pose)
