"""Small convolutional noise predictor over [T,H,W,C] videos.

Per-frame residual 3x3 convolution blocks with an additive sinusoidal time
embedding, conditioned on the first RGB frame (broadcast over time and, for
the 6-channel joint model, repeated for both channel halves). The optional
two-pass channel cross-attention sits right after the input projection.

Parameters live in one flat float32 vector described by a layout of named
shapes; forward and backward are written directly in numpy so the compute
dtype is explicit (float32 for training, float64 for gradient checks).

Channel projections are evaluated in fixed 3-channel input groups and
3-channel output groups. That keeps the arithmetic of the RGB path
bit-identical when a trained 3-channel model is widened to 6 channels with
zero-initialized new weights: the widened model reproduces RGB outputs
exactly and emits exactly-zero point channels until fine-tuned.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import LayoutError, ParameterError, ShapeError


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 3
    hidden_channels: int = 16
    depth: int = 2
    time_embed_dim: int = 16
    cond_channels: int = 3
    use_cross_attention: bool = False
    attention_heads: int = 2

    def __post_init__(self):
        for name in ("in_channels", "hidden_channels", "depth", "time_embed_dim",
                     "cond_channels", "attention_heads"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")
        if self.in_channels % 3 or self.cond_channels % 3:
            raise ParameterError("channel counts must be multiples of 3")
        if self.time_embed_dim % 2:
            raise ParameterError("time_embed_dim must be even")
        if self.use_cross_attention:
            half = self.hidden_channels // 2
            if self.hidden_channels % 2 or half % self.attention_heads:
                raise ParameterError(
                    "cross-attention needs hidden_channels divisible by 2*attention_heads"
                )

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "hidden_channels": self.hidden_channels,
            "depth": self.depth,
            "time_embed_dim": self.time_embed_dim,
            "cond_channels": self.cond_channels,
            "use_cross_attention": self.use_cross_attention,
            "attention_heads": self.attention_heads,
        }

    @staticmethod
    def from_dict(d: dict) -> "DenoiserConfig":
        return DenoiserConfig(**d)


_ATTN_NAMES = ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")


@dataclass(frozen=True)
class Layout:
    """Ordered (name, shape) entries partitioning a flat parameter vector."""

    entries: tuple

    def __post_init__(self):
        offsets = {}
        pos = 0
        for name, shape in self.entries:
            offsets[name] = (pos, tuple(shape))
            pos += int(np.prod(shape))
        object.__setattr__(self, "_offsets", offsets)
        object.__setattr__(self, "total", pos)

    def view(self, vec: np.ndarray, name: str) -> np.ndarray:
        pos, shape = self._offsets[name]
        return vec[pos : pos + int(np.prod(shape))].reshape(shape)

    def names(self):
        return [name for name, _ in self.entries]

    def to_json(self) -> str:
        return json.dumps([[name, list(shape)] for name, shape in self.entries])

    @staticmethod
    def from_json(text: str) -> "Layout":
        return Layout(tuple((name, tuple(shape)) for name, shape in json.loads(text)))


def build_layout(cfg: DenoiserConfig) -> Layout:
    h = cfg.hidden_channels
    entries = [
        ("in.w", (cfg.in_channels + cfg.cond_channels, h)),
        ("in.b", (h,)),
        ("time.w", (cfg.time_embed_dim, h)),
        ("time.b", (h,)),
    ]
    if cfg.use_cross_attention:
        ch = h // 2
        for p in (1, 2):
            for nm in _ATTN_NAMES:
                shape = (ch, ch) if nm.startswith("w") else (ch,)
                entries.append((f"xattn{p}.{nm}", shape))
    for layer in range(cfg.depth):
        entries += [
            (f"res{layer}.w1", (3, 3, h, h)),
            (f"res{layer}.b1", (h,)),
            (f"res{layer}.w2", (3, 3, h, h)),
            (f"res{layer}.b2", (h,)),
        ]
    entries += [("out.w", (h, cfg.in_channels)), ("out.b", (cfg.in_channels,))]
    return Layout(tuple(entries))


@dataclass(frozen=True)
class DenoiserParams:
    """Flat float32 parameter vector plus the layout describing it."""

    vector: np.ndarray
    layout: Layout

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float32).reshape(-1)
        if vec.size != self.layout.total:
            raise LayoutError(
                f"vector has {vec.size} floats but layout needs {self.layout.total}"
            )
        object.__setattr__(self, "vector", vec)

    def view(self, name: str) -> np.ndarray:
        return self.layout.view(self.vector, name)


def init_params(cfg: DenoiserConfig, seed: int = 0) -> DenoiserParams:
    """Fan-in scaled Gaussian init; biases and attention output projections zero."""
    layout = build_layout(cfg)
    rng = np.random.default_rng(seed)
    vec = np.zeros(layout.total, dtype=np.float32)
    for name, shape in layout.entries:
        if len(shape) == 1 or name.endswith(".wo"):
            continue
        fan_in = int(np.prod(shape[:-1]))
        view = layout.view(vec, name)
        view[...] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape).astype(np.float32)
    return DenoiserParams(vector=vec, layout=layout)


def time_embedding(t: int, dim: int, dtype=np.float64) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(dtype)


def _sigmoid(x):
    # tanh form is overflow-safe for any input
    return 0.5 * np.tanh(0.5 * x) + 0.5


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad_from_sig(x, s):
    return s * (1.0 + x * (1.0 - s))


def _silu_grad(x):
    return _silu_grad_from_sig(x, _sigmoid(x))


def _im2col(x: np.ndarray) -> np.ndarray:
    """[T,H,W,Ci] -> [T*H*W, 9*Ci] patches of the zero-padded input."""
    t, hh, ww, ci = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((t, hh, ww, 9, ci), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, dy * 3 + dx, :] = xp[:, dy : dy + hh, dx : dx + ww, :]
    return cols.reshape(t * hh * ww, 9 * ci)


def _col2im(d_cols: np.ndarray, shape) -> np.ndarray:
    """Adjoint of :func:`_im2col`; d_cols is [T*H*W, 9*Ci]."""
    t, hh, ww, ci = shape
    d5 = d_cols.reshape(t, hh, ww, 9, ci)
    d_xp = np.zeros((t, hh + 2, ww + 2, ci), dtype=d_cols.dtype)
    for dy in range(3):
        for dx in range(3):
            d_xp[:, dy : dy + hh, dx : dx + ww, :] += d5[:, :, :, dy * 3 + dx, :]
    return d_xp[:, 1:-1, 1:-1, :]


def _conv_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    t, hh, ww, ci = x.shape
    co = w.shape[3]
    cols = _im2col(x)
    out = cols @ w.reshape(9 * ci, co) + b
    return out.reshape(t, hh, ww, co), cols


def _conv_bwd(cols: np.ndarray, w: np.ndarray, d_out: np.ndarray, in_shape):
    co = w.shape[3]
    d_flat = np.ascontiguousarray(d_out).reshape(-1, co)
    d_w = (cols.T @ d_flat).reshape(w.shape)
    d_x = _col2im(d_flat @ w.reshape(-1, co).T, in_shape)
    d_b = d_flat.sum(axis=0)
    return d_x, d_w, d_b


def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-frame 3x3 same-padding convolution, channels last."""
    return _conv_fwd(x, w, b)[0]


def conv3x3_backward(x: np.ndarray, w: np.ndarray, d_out: np.ndarray):
    return _conv_bwd(_im2col(x), w, d_out, x.shape)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    t, n, ch = x.shape
    return x.reshape(t, n, heads, ch // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    t, m, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(t, n, m * dh)


def _attn_forward(q_src, kv_src, p: dict, heads: int):
    """Scaled dot-product attention over spatial tokens of each frame,
    added residually to the query source."""
    q = q_src @ p["wq"] + p["bq"]
    k = kv_src @ p["wk"] + p["bk"]
    v = kv_src @ p["wv"] + p["bv"]
    qh, kh, vh = (_split_heads(a, heads) for a in (q, k, v))
    # python-float scale keeps the compute dtype of the inputs
    scale = float(1.0 / np.sqrt(qh.shape[-1]))
    logits = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    logits -= logits.max(axis=-1, keepdims=True)
    expv = np.exp(logits)
    attn = expv / expv.sum(axis=-1, keepdims=True)
    oh = attn @ vh
    o = _merge_heads(oh)
    update = o @ p["wo"] + p["bo"]
    out = q_src + update
    cache = {"q_src": q_src, "kv_src": kv_src, "qh": qh, "kh": kh, "vh": vh,
             "attn": attn, "o": o, "scale": scale, "heads": heads, "p": p}
    return out, cache


def _attn_backward(cache, d_out):
    """Returns (d_q_src, d_kv_src, grads dict). d_out is the cotangent of the
    residual output; the identity path contributes d_out to d_q_src."""
    p = cache["p"]
    heads = cache["heads"]
    o_flat = cache["o"].reshape(-1, cache["o"].shape[-1])
    d_flat = d_out.reshape(-1, d_out.shape[-1])
    grads = {
        "wo": o_flat.T @ d_flat,
        "bo": d_flat.sum(axis=0),
    }
    d_o = d_out @ p["wo"].T
    d_oh = _split_heads(d_o, heads)
    attn, vh = cache["attn"], cache["vh"]
    d_attn = d_oh @ vh.transpose(0, 1, 3, 2)
    d_vh = attn.transpose(0, 1, 3, 2) @ d_oh
    tmp = (d_attn * attn).sum(axis=-1, keepdims=True)
    d_logits = attn * (d_attn - tmp)
    d_qh = (d_logits @ cache["kh"]) * cache["scale"]
    d_kh = (d_logits.transpose(0, 1, 3, 2) @ cache["qh"]) * cache["scale"]
    d_q = _merge_heads(d_qh)
    d_k = _merge_heads(d_kh)
    d_v = _merge_heads(d_vh)
    qs = cache["q_src"].reshape(-1, cache["q_src"].shape[-1])
    ks = cache["kv_src"].reshape(-1, cache["kv_src"].shape[-1])
    grads["wq"] = qs.T @ d_q.reshape(-1, d_q.shape[-1])
    grads["bq"] = d_q.reshape(-1, d_q.shape[-1]).sum(axis=0)
    grads["wk"] = ks.T @ d_k.reshape(-1, d_k.shape[-1])
    grads["bk"] = d_k.reshape(-1, d_k.shape[-1]).sum(axis=0)
    grads["wv"] = ks.T @ d_v.reshape(-1, d_v.shape[-1])
    grads["bv"] = d_v.reshape(-1, d_v.shape[-1]).sum(axis=0)
    d_q_src = d_out + d_q @ p["wq"].T
    d_kv_src = d_k @ p["wk"].T + d_v @ p["wv"].T
    return d_q_src, d_kv_src, grads


def cross_attention_block(v_feat, p_feat, params: dict, heads: int = 1):
    """Two-pass cross-attention between feature halves.

    Pass 1: spatial tokens of ``v_feat`` query tokens of ``p_feat``, the
    attention output is added residually to ``v_feat``. Pass 2 swaps roles,
    using the pass-1 outputs. ``params`` holds per-pass projections under
    keys ``xattn1.wq`` ... ``xattn2.bo``. With zero output projections both
    passes are exact identities.
    """
    v = np.asarray(v_feat)
    p = np.asarray(p_feat)
    if v.shape != p.shape:
        raise ShapeError(f"feature halves differ: {v.shape} vs {p.shape}")
    t, hh, ww, ch = v.shape
    vt = v.reshape(t, hh * ww, ch)
    pt = p.reshape(t, hh * ww, ch)
    p1 = {nm: params[f"xattn1.{nm}"] for nm in _ATTN_NAMES}
    p2 = {nm: params[f"xattn2.{nm}"] for nm in _ATTN_NAMES}
    v1, cache1 = _attn_forward(vt, pt, p1, heads)
    p_out, cache2 = _attn_forward(pt, v1, p2, heads)
    out_shape = (t, hh, ww, ch)
    return v1.reshape(out_shape), p_out.reshape(out_shape), (cache1, cache2)


def cross_attention_backward(caches, d_v_out, d_p_out):
    """Backward through :func:`cross_attention_block`.

    Returns (d_v_feat, d_p_feat, grads) with grads keyed like the params.
    """
    cache1, cache2 = caches
    t, n, ch = cache1["q_src"].shape
    d_v1 = np.zeros((t, n, ch), dtype=d_v_out.dtype)
    d_v_out = d_v_out.reshape(t, n, ch)
    d_p_out = d_p_out.reshape(t, n, ch)
    # pass 2: queries were p, keys/values were v1
    d_p_feat, d_v1_from2, g2 = _attn_backward(cache2, d_p_out)
    d_v1 = d_v_out + d_v1_from2
    # pass 1: queries were v, keys/values were p
    d_v_feat, d_p_from1, g1 = _attn_backward(cache1, d_v1)
    d_p_feat = d_p_feat + d_p_from1
    grads = {f"xattn1.{nm}": g1[nm] for nm in _ATTN_NAMES}
    grads.update({f"xattn2.{nm}": g2[nm] for nm in _ATTN_NAMES})
    return d_v_feat, d_p_feat, grads


def _param_views(vec: np.ndarray, layout: Layout, dtype) -> dict:
    return {name: layout.view(vec, name).astype(dtype) for name in layout.names()}


def _grouped_in_proj(x, w, b):
    """Input projection accumulated over fixed 3-channel groups."""
    flat = x.reshape(-1, x.shape[-1])
    out = np.broadcast_to(b, (flat.shape[0], w.shape[1])).copy()
    for g in range(x.shape[-1] // 3):
        out += flat[:, 3 * g : 3 * g + 3] @ w[3 * g : 3 * g + 3, :]
    return out.reshape(x.shape[:-1] + (w.shape[1],))


def _grouped_out_proj(h, w, b):
    """Output projection evaluated per 3-channel output group."""
    flat = h.reshape(-1, h.shape[-1])
    parts = []
    for g in range(w.shape[1] // 3):
        sl = slice(3 * g, 3 * g + 3)
        parts.append(flat @ w[:, sl] + b[sl])
    return np.concatenate(parts, axis=-1).reshape(h.shape[:-1] + (w.shape[1],))


def denoise_forward(
    params: DenoiserParams,
    cfg: DenoiserConfig,
    z_t: np.ndarray,
    t: int,
    cond_frame: np.ndarray,
    dtype=np.float32,
    want_cache: bool = False,
):
    """Predict the noise in ``z_t`` [T,H,W,C]; returns eps_hat (and a cache
    for :func:`denoise_backward` when requested).

    ``cond_frame`` is the first RGB frame [H,W,3]; it is broadcast over time
    and, when ``cond_channels`` is 6, repeated for both channel halves.
    """
    return raw_forward(params.vector, params.layout, cfg, z_t, t, cond_frame,
                       dtype=dtype, want_cache=want_cache)


def raw_forward(
    vec: np.ndarray,
    layout: Layout,
    cfg: DenoiserConfig,
    z_t: np.ndarray,
    t: int,
    cond_frame: np.ndarray,
    dtype=np.float32,
    want_cache: bool = False,
):
    """Forward pass on an arbitrary-dtype parameter vector (gradient checks
    perturb a float64 copy of the stored float32 parameters)."""
    z = np.asarray(z_t, dtype=dtype)
    if z.ndim != 4 or z.shape[3] != cfg.in_channels:
        raise ShapeError(f"input {z.shape} does not have {cfg.in_channels} channels")
    cond = np.asarray(cond_frame, dtype=dtype)
    if cond.shape != (z.shape[1], z.shape[2], 3):
        raise ShapeError(f"cond frame {cond.shape} does not match {z.shape[1:3]} + (3,)")
    if cfg.cond_channels == 6:
        cond_full = np.concatenate([cond, cond], axis=-1)
    else:
        cond_full = cond
    frames = z.shape[0]
    x = np.concatenate([z, np.broadcast_to(cond_full, (frames,) + cond_full.shape)], axis=-1)

    p = _param_views(vec, layout, dtype)
    h = _grouped_in_proj(x, p["in.w"], p["in.b"])
    temb = time_embedding(t, cfg.time_embed_dim, dtype)
    h = h + (temb @ p["time.w"] + p["time.b"])

    attn_caches = None
    h_pre_attn = h
    if cfg.use_cross_attention:
        half = cfg.hidden_channels // 2
        v_out, p_out, attn_caches = cross_attention_block(
            h[..., :half], h[..., half:], p, heads=cfg.attention_heads
        )
        h = np.concatenate([v_out, p_out], axis=-1)

    block_caches = []
    for layer in range(cfg.depth):
        s0 = _sigmoid(h)
        a1 = h * s0
        c1, cols1 = _conv_fwd(a1, p[f"res{layer}.w1"], p[f"res{layer}.b1"])
        s1 = _sigmoid(c1)
        a2 = c1 * s1
        c2, cols2 = _conv_fwd(a2, p[f"res{layer}.w2"], p[f"res{layer}.b2"])
        block_caches.append((h, s0, c1, s1, cols1, cols2) if want_cache else None)
        h = h + c2

    eps_hat = _grouped_out_proj(h, p["out.w"], p["out.b"])
    if not want_cache:
        return eps_hat, None
    cache = {
        "x": x, "temb": temb, "h_pre_attn": h_pre_attn, "attn": attn_caches,
        "blocks": block_caches, "h_final": h, "views": p, "dtype": dtype,
    }
    return eps_hat, cache


def denoise_backward(params: DenoiserParams, cfg: DenoiserConfig, cache: dict, d_eps: np.ndarray) -> np.ndarray:
    """Gradient of a scalar with cotangent ``d_eps`` w.r.t. every parameter.

    Returns a flat float64 vector matching the parameter layout.
    """
    p = cache["views"]
    dtype = cache["dtype"]
    d_eps = np.asarray(d_eps, dtype=dtype)
    grads = {name: None for name in params.layout.names()}

    h_final = cache["h_final"]
    hd = h_final.shape[-1]
    h_flat = h_final.reshape(-1, hd)
    d_h = np.zeros_like(h_final)
    w_out = p["out.w"]
    d_w_out = np.zeros_like(w_out)
    d_b_out = np.zeros(w_out.shape[1], dtype=dtype)
    for g in range(w_out.shape[1] // 3):
        sl = slice(3 * g, 3 * g + 3)
        dg = d_eps[..., sl].reshape(-1, 3)
        d_w_out[:, sl] = h_flat.T @ dg
        d_b_out[sl] = dg.sum(axis=0)
        d_h += (dg @ w_out[:, sl].T).reshape(h_final.shape)
    grads["out.w"], grads["out.b"] = d_w_out, d_b_out

    for layer in range(cfg.depth - 1, -1, -1):
        h_in, s0, c1, s1, cols1, cols2 = cache["blocks"][layer]
        d_c2 = d_h  # residual: d_h also flows to h_in directly
        d_a2, d_w2, d_b2 = _conv_bwd(cols2, p[f"res{layer}.w2"], d_c2, c1.shape)
        d_c1 = d_a2 * _silu_grad_from_sig(c1, s1)
        d_a1, d_w1, d_b1 = _conv_bwd(cols1, p[f"res{layer}.w1"], d_c1, h_in.shape)
        d_h = d_h + d_a1 * _silu_grad_from_sig(h_in, s0)
        grads[f"res{layer}.w1"], grads[f"res{layer}.b1"] = d_w1, d_b1
        grads[f"res{layer}.w2"], grads[f"res{layer}.b2"] = d_w2, d_b2

    if cfg.use_cross_attention:
        half = cfg.hidden_channels // 2
        d_v, d_p, attn_grads = cross_attention_backward(
            cache["attn"], d_h[..., :half], d_h[..., half:]
        )
        t, hh, ww, _ = cache["h_pre_attn"].shape
        d_h = np.concatenate(
            [d_v.reshape(t, hh, ww, half), d_p.reshape(t, hh, ww, half)], axis=-1
        )
        grads.update(attn_grads)

    d_h_flat = d_h.reshape(-1, hd)
    grads["time.b"] = d_h_flat.sum(axis=0)
    grads["time.w"] = np.outer(cache["temb"], grads["time.b"])
    grads["in.b"] = d_h_flat.sum(axis=0)

    x = cache["x"]
    w_in = p["in.w"]
    d_w_in = np.zeros_like(w_in)
    x_flat = x.reshape(-1, x.shape[-1])
    for g in range(x.shape[-1] // 3):
        sl = slice(3 * g, 3 * g + 3)
        d_w_in[sl, :] = x_flat[:, sl].T @ d_h_flat
    grads["in.w"] = d_w_in

    flat = np.zeros(params.layout.total, dtype=np.float64)
    for name in params.layout.names():
        g = grads[name]
        if g is None:
            raise ParameterError(f"missing gradient for {name}")
        params.layout.view(flat, name)[...] = g.astype(np.float64)
    return flat


def augment_channels(rgb_params: DenoiserParams, rgb_cfg: DenoiserConfig,
                     use_cross_attention: bool = True) -> tuple[DenoiserParams, DenoiserConfig]:
    """Widen a trained 3-channel model to 6 channels.

    Existing weights are copied bit-exactly into the RGB slots of the wider
    projections; every new weight (including all cross-attention
    projections) starts at zero, so immediately after augmentation the joint
    model reproduces the RGB model's outputs on the RGB slice exactly and
    emits exactly-zero point channels.
    """
    if rgb_cfg.in_channels != 3 or rgb_cfg.cond_channels != 3:
        raise LayoutError(
            f"augmentation expects a 3-channel model, got in={rgb_cfg.in_channels}, "
            f"cond={rgb_cfg.cond_channels}"
        )
    if build_layout(rgb_cfg).to_json() != rgb_params.layout.to_json():
        raise LayoutError("parameter layout does not match the RGB config")
    joint_cfg = replace(
        rgb_cfg, in_channels=6, cond_channels=6, use_cross_attention=use_cross_attention
    )
    joint_layout = build_layout(joint_cfg)
    vec = np.zeros(joint_layout.total, dtype=np.float32)
    joint = DenoiserParams(vector=vec, layout=joint_layout)

    old_in = rgb_params.view("in.w")
    new_in = joint_layout.view(vec, "in.w")
    new_in[0:3, :] = old_in[0:3, :]    # z RGB slot
    new_in[6:9, :] = old_in[3:6, :]    # conditioning slot (first repeat)
    joint_layout.view(vec, "in.b")[...] = rgb_params.view("in.b")

    for name, _ in rgb_params.layout.entries:
        if name.startswith(("time.", "res")):
            joint_layout.view(vec, name)[...] = rgb_params.view(name)

    old_out = rgb_params.view("out.w")
    joint_layout.view(vec, "out.w")[:, 0:3] = old_out
    joint_layout.view(vec, "out.b")[0:3] = rgb_params.view("out.b")
    return joint, joint_cfg
