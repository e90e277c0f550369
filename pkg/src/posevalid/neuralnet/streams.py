"""The two validator streams: depth-crop towers and point-cloud correlation.

Class index 1 is "valid", index 0 "invalid".  Both streams end in a 2-way
softmax; the final classifier layer is zero-initialized so an untrained net
answers (0.5, 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import INVALID, VALID
from .layers import (
    conv2d_3x3,
    conv2d_3x3_backward,
    dense,
    dense_backward,
    dropout,
    dropout_backward,
    maxpool_2x2,
    maxpool_2x2_backward,
    relu,
    relu_backward,
    softmax,
)

LABEL_INDEX = {INVALID: 0, VALID: 1}
INDEX_LABEL = {0: INVALID, 1: VALID}


@dataclass
class Prob2:
    p_valid: float
    p_invalid: float

    def __post_init__(self):
        if not (0.0 <= self.p_valid <= 1.0 and 0.0 <= self.p_invalid <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        if abs(self.p_valid + self.p_invalid - 1.0) > 1e-6:
            raise ValueError("probabilities must sum to 1")


def fuse(a: Prob2, b: Prob2) -> tuple[Prob2, str]:
    """Score-average the two streams; exactly 0.5 counts as invalid."""
    p = Prob2(0.5 * (a.p_valid + b.p_valid), 0.5 * (a.p_invalid + b.p_invalid))
    return p, (VALID if p.p_valid > 0.5 else INVALID)


@dataclass
class DepthArch:
    """Depth stream: two conv towers, channel concat, combined block, 2 FC layers."""

    input_size: int = 224
    tower_widths: tuple = (64, 128, 256)
    combined_width: int = 0  # 0 -> 2 * last tower width
    fc_hidden: int = 256

    def __post_init__(self):
        self.tower_widths = tuple(int(w) for w in self.tower_widths)
        if len(self.tower_widths) != 3:
            raise ValueError("tower_widths must have 3 entries")
        if not self.combined_width:
            self.combined_width = 2 * self.tower_widths[2]
        if self.input_size % 32:
            raise ValueError(
                f"input_size {self.input_size} must be divisible by 2^5 (5 pooling layers)"
            )

    @property
    def flat_dim(self) -> int:
        s = self.input_size // 32
        return s * s * self.combined_width

    def to_json(self) -> dict:
        return {
            "kind": "depth",
            "input_size": self.input_size,
            "tower_widths": list(self.tower_widths),
            "combined_width": self.combined_width,
            "fc_hidden": self.fc_hidden,
        }


@dataclass
class CloudArch:
    """Point-cloud stream: per-point towers, dot-product correlation, FC head."""

    n_points: int = 1024
    mlp_widths: tuple = (64, 64, 64, 128, 1024)
    feature_dim: int = 128
    head_widths: tuple = (512, 256)

    def __post_init__(self):
        self.mlp_widths = tuple(int(w) for w in self.mlp_widths)
        self.head_widths = tuple(int(w) for w in self.head_widths)
        if len(self.mlp_widths) != 5 or len(self.head_widths) != 2:
            raise ValueError("mlp_widths needs 5 entries and head_widths 2")

    def to_json(self) -> dict:
        return {
            "kind": "cloud",
            "n_points": self.n_points,
            "mlp_widths": list(self.mlp_widths),
            "feature_dim": self.feature_dim,
            "head_widths": list(self.head_widths),
        }


def desk_depth_arch() -> DepthArch:
    """CPU-friendly profile; the architecture shape is unchanged."""
    return DepthArch(input_size=64, tower_widths=(8, 16, 32), fc_hidden=256)


def desk_cloud_arch() -> CloudArch:
    return CloudArch(n_points=256, mlp_widths=(8, 8, 8, 16, 128), feature_dim=16,
                     head_widths=(64, 32))


def arch_from_json(obj: dict):
    kind = obj.get("kind")
    if kind == "depth":
        return DepthArch(
            input_size=int(obj["input_size"]),
            tower_widths=tuple(obj["tower_widths"]),
            combined_width=int(obj["combined_width"]),
            fc_hidden=int(obj["fc_hidden"]),
        )
    if kind == "cloud":
        return CloudArch(
            n_points=int(obj["n_points"]),
            mlp_widths=tuple(obj["mlp_widths"]),
            feature_dim=int(obj["feature_dim"]),
            head_widths=tuple(obj["head_widths"]),
        )
    raise ValueError(f"unknown architecture kind {kind!r}")


@dataclass(eq=False)
class NetParams:
    """Named parameters plus Adam moment buffers for one stream."""

    arch: object
    params: dict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p))
            self.v.setdefault(name, np.zeros_like(p))


def _he_conv(rng, cin, cout, dtype):
    std = np.sqrt(2.0 / (9 * cin))
    return (rng.normal(size=(3, 3, cin, cout)) * std).astype(dtype)


def _he_dense(rng, din, dout, dtype):
    std = np.sqrt(2.0 / din)
    return (rng.normal(size=(din, dout)) * std).astype(dtype)


def init_depth_params(arch: DepthArch, seed: int = 0, dtype=np.float32) -> NetParams:
    rng = np.random.default_rng((seed, 101))
    w1, w2, w3 = arch.tower_widths
    cw = arch.combined_width
    p = {}
    for pfx in ("scene.", "model."):
        chain = [(1, w1), (w1, w2), (w2, w3), (w3, w3)]
        for i, (cin, cout) in enumerate(chain, 1):
            p[f"{pfx}c{i}w"] = _he_conv(rng, cin, cout, dtype)
            p[f"{pfx}c{i}b"] = np.zeros(cout, dtype=dtype)
    chain = [(2 * w3, cw), (cw, cw), (cw, cw), (cw, cw)]
    for i, (cin, cout) in enumerate(chain, 1):
        p[f"comb.c{i}w"] = _he_conv(rng, cin, cout, dtype)
        p[f"comb.c{i}b"] = np.zeros(cout, dtype=dtype)
    p["fc1w"] = _he_dense(rng, arch.flat_dim, arch.fc_hidden, dtype)
    p["fc1b"] = np.zeros(arch.fc_hidden, dtype=dtype)
    p["fc2w"] = np.zeros((arch.fc_hidden, 2), dtype=dtype)
    p["fc2b"] = np.zeros(2, dtype=dtype)
    return NetParams(arch=arch, params=p)


def init_cloud_params(arch: CloudArch, seed: int = 0, dtype=np.float32) -> NetParams:
    rng = np.random.default_rng((seed, 202))
    p = {}
    for pfx in ("scene.", "model."):
        din = 3
        for i, width in enumerate(arch.mlp_widths, 1):
            p[f"{pfx}p{i}w"] = _he_dense(rng, din, width, dtype)
            p[f"{pfx}p{i}b"] = np.zeros(width, dtype=dtype)
            din = width
        desc = arch.mlp_widths[2] + arch.mlp_widths[4]
        p[f"{pfx}featw"] = _he_dense(rng, desc, arch.feature_dim, dtype)
        p[f"{pfx}featb"] = np.zeros(arch.feature_dim, dtype=dtype)
    h1, h2 = arch.head_widths
    p["fc1w"] = _he_dense(rng, arch.n_points, h1, dtype)
    p["fc1b"] = np.zeros(h1, dtype=dtype)
    p["fc2w"] = _he_dense(rng, h1, h2, dtype)
    p["fc2b"] = np.zeros(h2, dtype=dtype)
    p["fc3w"] = np.zeros((h2, 2), dtype=dtype)
    p["fc3b"] = np.zeros(2, dtype=dtype)
    return NetParams(arch=arch, params=p)


# ---------------------------------------------------------------- depth stream

def _conv_block(h, p, name, caches):
    h, c_conv = conv2d_3x3(h, p[name + "w"], p[name + "b"])
    h, c_relu = relu(h)
    caches.append((name, c_conv, c_relu))
    return h


def _conv_block_backward(dh, p, caches, grads):
    name, c_conv, c_relu = caches.pop()
    dh = relu_backward(dh, c_relu)
    dh, dw, db = conv2d_3x3_backward(dh, c_conv)
    grads[name + "w"] = dw
    grads[name + "b"] = db
    return dh


def _depth_tower(x, p, pfx, caches):
    h = _conv_block(x, p, pfx + "c1", caches)
    h, cp = maxpool_2x2(h)
    caches.append(("pool", cp))
    h = _conv_block(h, p, pfx + "c2", caches)
    h, cp = maxpool_2x2(h)
    caches.append(("pool", cp))
    h = _conv_block(h, p, pfx + "c3", caches)
    h = _conv_block(h, p, pfx + "c4", caches)
    h, cp = maxpool_2x2(h)
    caches.append(("pool", cp))
    return h


def _depth_tower_backward(dh, p, caches, grads):
    _, cp = caches.pop()
    dh = maxpool_2x2_backward(dh, cp)
    dh = _conv_block_backward(dh, p, caches, grads)
    dh = _conv_block_backward(dh, p, caches, grads)
    _, cp = caches.pop()
    dh = maxpool_2x2_backward(dh, cp)
    dh = _conv_block_backward(dh, p, caches, grads)
    _, cp = caches.pop()
    dh = maxpool_2x2_backward(dh, cp)
    return _conv_block_backward(dh, p, caches, grads)


def depth_forward(x: np.ndarray, net: NetParams, train_flag: bool = False, seed: int = 0,
                  keep: float = 0.7):
    """Batched forward pass.  x is (B, S, S, 2): scene crop then model crop."""
    arch, p = net.arch, net.params
    if x.ndim != 4 or x.shape[1] != arch.input_size or x.shape[3] != 2:
        raise ValueError(f"depth stream expects (B, {arch.input_size}, {arch.input_size}, 2), got {x.shape}")
    cs, cm, cc = [], [], []
    hs = _depth_tower(x[..., 0:1], p, "scene.", cs)
    hm = _depth_tower(x[..., 1:2], p, "model.", cm)
    h = np.concatenate([hs, hm], axis=3)

    h = _conv_block(h, p, "comb.c1", cc)
    h = _conv_block(h, p, "comb.c2", cc)
    h, cp = maxpool_2x2(h)
    cc.append(("pool", cp))
    h = _conv_block(h, p, "comb.c3", cc)
    h = _conv_block(h, p, "comb.c4", cc)
    h, cp = maxpool_2x2(h)
    cc.append(("pool", cp))

    shape_pre_flat = h.shape
    h = h.reshape(len(h), -1)
    h, c_fc1 = dense(h, p["fc1w"], p["fc1b"])
    h, c_r = relu(h)
    h, c_drop = dropout(h, keep, seed, train_flag)
    logits, c_fc2 = dense(h, p["fc2w"], p["fc2b"])
    cache = (cs, cm, cc, shape_pre_flat, c_fc1, c_r, c_drop, c_fc2, hs.shape[3])
    return logits, cache


def depth_backward(dlogits: np.ndarray, net: NetParams, cache):
    p = net.params
    cs, cm, cc, shape_pre_flat, c_fc1, c_r, c_drop, c_fc2, split = cache
    grads = {}
    dh, grads["fc2w"], grads["fc2b"] = dense_backward(dlogits, c_fc2)
    dh = dropout_backward(dh, c_drop)
    dh = relu_backward(dh, c_r)
    dh, grads["fc1w"], grads["fc1b"] = dense_backward(dh, c_fc1)
    dh = dh.reshape(shape_pre_flat)

    _, cp = cc.pop()
    dh = maxpool_2x2_backward(dh, cp)
    dh = _conv_block_backward(dh, p, cc, grads)
    dh = _conv_block_backward(dh, p, cc, grads)
    _, cp = cc.pop()
    dh = maxpool_2x2_backward(dh, cp)
    dh = _conv_block_backward(dh, p, cc, grads)
    dh = _conv_block_backward(dh, p, cc, grads)

    _depth_tower_backward(dh[..., split:], p, cm, grads)
    _depth_tower_backward(dh[..., :split], p, cs, grads)
    return grads


# ---------------------------------------------------------------- cloud stream

def _point_tower(pts, p, pfx, arch):
    caches = []
    h = pts
    activations = []
    for i in range(1, 6):
        h, c_d = dense(h, p[f"{pfx}p{i}w"], p[f"{pfx}p{i}b"])
        h, c_r = relu(h)
        caches.append((c_d, c_r))
        activations.append(h)
    local = activations[2]
    top = activations[4]
    idx = top.argmax(axis=1)  # (B, C5), first max wins
    g = np.take_along_axis(top, idx[:, None, :], axis=1)[:, 0, :]
    desc = np.concatenate([local, np.broadcast_to(g[:, None, :], local.shape[:2] + g.shape[1:])],
                          axis=2)
    f, c_feat = dense(desc, p[f"{pfx}featw"], p[f"{pfx}featb"])
    f, c_fr = relu(f)
    return f, (caches, idx, top.shape, local.shape[2], c_feat, c_fr)


def _point_tower_backward(df, p, pfx, cache, grads):
    caches, idx, top_shape, local_dim, c_feat, c_fr = cache
    df = relu_backward(df, c_fr)
    ddesc, grads[f"{pfx}featw"], grads[f"{pfx}featb"] = dense_backward(df, c_feat)
    dlocal = ddesc[..., :local_dim]
    dg = ddesc[..., local_dim:].sum(axis=1)
    dtop = np.zeros(top_shape, dtype=df.dtype)
    np.put_along_axis(dtop, idx[:, None, :], dg[:, None, :], axis=1)

    dh = dtop
    for i in (5, 4):
        c_d, c_r = caches[i - 1]
        dh = relu_backward(dh, c_r)
        dh, grads[f"{pfx}p{i}w"], grads[f"{pfx}p{i}b"] = dense_backward(dh, c_d)
    dh = dh + dlocal
    for i in (3, 2, 1):
        c_d, c_r = caches[i - 1]
        dh = relu_backward(dh, c_r)
        dh, grads[f"{pfx}p{i}w"], grads[f"{pfx}p{i}b"] = dense_backward(dh, c_d)
    return dh


def cloud_forward(scene_pts: np.ndarray, model_pts: np.ndarray, net: NetParams,
                  train_flag: bool = False, seed: int = 0, keep: float = 0.7):
    """Batched forward pass.  Both inputs are (B, n_points, 3)."""
    arch, p = net.arch, net.params
    if scene_pts.shape != model_pts.shape or scene_pts.shape[1] != arch.n_points:
        raise ValueError(
            f"cloud stream expects matching (B, {arch.n_points}, 3) clouds, "
            f"got {scene_pts.shape} and {model_pts.shape}")
    f_scene, cache_s = _point_tower(scene_pts, p, "scene.", arch)
    f_model, cache_m = _point_tower(model_pts, p, "model.", arch)

    corr = f_model @ f_scene.transpose(0, 2, 1)  # (B, N_model, N_scene)
    idx = corr.argmax(axis=2)
    r = np.take_along_axis(corr, idx[..., None], axis=2)[..., 0]

    h, c_fc1 = dense(r, p["fc1w"], p["fc1b"])
    h, c_r1 = relu(h)
    h, c_fc2 = dense(h, p["fc2w"], p["fc2b"])
    h, c_r2 = relu(h)
    h, c_drop = dropout(h, keep, seed, train_flag)
    logits, c_fc3 = dense(h, p["fc3w"], p["fc3b"])
    cache = (cache_s, cache_m, f_scene, f_model, idx, corr.shape,
             c_fc1, c_r1, c_fc2, c_r2, c_drop, c_fc3)
    return logits, cache


def cloud_backward(dlogits: np.ndarray, net: NetParams, cache):
    p = net.params
    (cache_s, cache_m, f_scene, f_model, idx, corr_shape,
     c_fc1, c_r1, c_fc2, c_r2, c_drop, c_fc3) = cache
    grads = {}
    dh, grads["fc3w"], grads["fc3b"] = dense_backward(dlogits, c_fc3)
    dh = dropout_backward(dh, c_drop)
    dh = relu_backward(dh, c_r2)
    dh, grads["fc2w"], grads["fc2b"] = dense_backward(dh, c_fc2)
    dh = relu_backward(dh, c_r1)
    dr, grads["fc1w"], grads["fc1b"] = dense_backward(dh, c_fc1)

    dcorr = np.zeros(corr_shape, dtype=dr.dtype)
    np.put_along_axis(dcorr, idx[..., None], dr[..., None], axis=2)
    df_model = dcorr @ f_scene
    df_scene = dcorr.transpose(0, 2, 1) @ f_model

    _point_tower_backward(df_model, p, "model.", cache_m, grads)
    _point_tower_backward(df_scene, p, "scene.", cache_s, grads)
    return grads


# ---------------------------------------------------------------- single-pair API

def _as_points(cloud) -> np.ndarray:
    pts = getattr(cloud, "points", cloud)
    return np.asarray(pts)


def depth_stream_forward(d_norm: np.ndarray, d_tilde_norm: np.ndarray, net: NetParams,
                         train_flag: bool = False, seed: int = 0) -> Prob2:
    """Classify one normalized scene/model depth-crop pair."""
    x = np.stack([np.asarray(d_norm), np.asarray(d_tilde_norm)], axis=-1)[None]
    logits, _ = depth_forward(x.astype(np.float32, copy=False), net, train_flag, seed)
    probs = softmax(logits.astype(np.float64))[0]
    return Prob2(float(probs[LABEL_INDEX[VALID]]), float(probs[LABEL_INDEX[INVALID]]))


def pc_stream_forward(scene_cloud, model_cloud, net: NetParams,
                      train_flag: bool = False, seed: int = 0) -> Prob2:
    """Classify one canonicalized scene cloud against the model cloud."""
    s = _as_points(scene_cloud)[None].astype(np.float32, copy=False)
    m = _as_points(model_cloud)[None].astype(np.float32, copy=False)
    logits, _ = cloud_forward(s, m, net, train_flag, seed)
    probs = softmax(logits.astype(np.float64))[0]
    return Prob2(float(probs[LABEL_INDEX[VALID]]), float(probs[LABEL_INDEX[INVALID]]))
