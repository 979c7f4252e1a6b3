"""Multimodal infusion: modal-conditioned affine modulation of K, V and FF.

For every infused layer a global modal embedding ``I`` (one vector per
sample) is projected to a multiplier and an adder in the model width,

    I_mul = I @ W_d + b_d        I_add = I @ W_a + b_a

and the frozen model's keys/values become ``X * I_mul + I_add`` (per head,
broadcast over tokens). A per-head sigmoid gate, shifted by the cosine
between the raw value vectors and the projected multiplier, rescales the
infused K and V. The FF hidden activation is multiplied by ``I @ W_f + b_f``.

Initialisation makes every multiplier exactly 1 and every adder exactly 0,
so with rescaling disabled the infused model reproduces the frozen model
bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .transformer import LMConfig, attention_weights

POOLINGS = ("per_token", "mean_over_tokens")
# Table 5's best row, 1-indexed over a 32-layer model.
PAPER_LAYERS_32 = (13, 17, 21, 25, 29, 32)


@dataclass
class MiTConfig:
    infused_layers: tuple[int, ...] = (3, 5, 7)
    enable_kv: bool = True
    enable_ff: bool = True
    enable_rescale: bool = True
    gate_init: float = 10.0
    rescale_pooling: str = "per_token"
    d_I: int = 32

    def __post_init__(self):
        self.infused_layers = tuple(sorted(set(int(i) for i in self.infused_layers)))
        if self.rescale_pooling not in POOLINGS:
            raise ValueError(f"rescale_pooling must be one of {POOLINGS}")

    def validate(self, lm: LMConfig) -> None:
        bad = [i for i in self.infused_layers if not 0 <= i < lm.n_layers]
        if bad:
            raise ValueError(f"infused layers {bad} outside [0, {lm.n_layers})")

    @classmethod
    def paper(cls, lm: LMConfig | None = None, **overrides) -> "MiTConfig":
        """7B-scale preset: CLIP-L width modal embedding, default layer policy."""
        n = lm.n_layers if lm is not None else 32
        return cls(**{"infused_layers": select_layers(n), "d_I": 768, **overrides})

    @property
    def any_enabled(self) -> bool:
        return bool(self.infused_layers) and (self.enable_kv or self.enable_ff or self.enable_rescale)


def select_layers(n_layers: int, policy="paper_default", stride: int = 2) -> tuple[int, ...]:
    """Infusion sites, 0-indexed.

    ``paper_default`` rescales the best 32-layer set {13,17,21,25,29,32}
    proportionally to ``n_layers``. ``last_third_stride`` takes every
    ``stride``-th layer (1-indexed) from ceil(n/3)+1 upward, plus the last.
    An explicit sequence is validated and returned sorted.
    """
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    if isinstance(policy, str):
        if policy == "paper_default":
            one_based = {max(1, min(n_layers, round(l * n_layers / 32))) for l in PAPER_LAYERS_32}
        elif policy == "last_third_stride":
            if stride < 1:
                raise ValueError("stride must be >= 1")
            start = math.ceil(n_layers / 3) + 1
            one_based = set(range(start, n_layers + 1, stride)) | {n_layers}
        else:
            raise ValueError(f"unknown layer policy {policy!r}")
        return tuple(sorted(l - 1 for l in one_based))
    layers = sorted(set(int(i) for i in policy))
    bad = [i for i in layers if not 0 <= i < n_layers]
    if bad:
        raise ValueError(f"layer indices {bad} out of range [0, {n_layers})")
    return tuple(layers)


# --------------------------------------------------------------------------
# the five operations


def affine_project(I, W, b) -> Tensor:
    I, W, b = ad.as_tensor(I), ad.as_tensor(W), ad.as_tensor(b)
    if I.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"affine_project: I {I.shape}, W {W.shape}, b {b.shape} do not fit")
    return I @ W + b


def _per_head(vec: Tensor, n_heads: int, d_head: int) -> Tensor:
    # (..., d_T) -> (..., 1, h, d_h): the singleton is the token axis
    lead = vec.shape[:-1]
    return vec.reshape(*lead, *((1,) if lead else ()), n_heads, d_head)


def infuse_kv(X, I_mul, I_add) -> Tensor:
    """``X[..., t, j, c] * I_mul[j, c] + I_add[j, c]`` for X of shape (..., L, h, d_h)."""
    X, I_mul, I_add = ad.as_tensor(X), ad.as_tensor(I_mul), ad.as_tensor(I_add)
    h, dh = X.shape[-2:]
    for name, t in (("I_mul", I_mul), ("I_add", I_add)):
        if t.shape[-1] != h * dh:
            raise ShapeError(f"infuse_kv: {name} width {t.shape[-1]} != h*d_h = {h}*{dh} (X {X.shape})")
    return X * _per_head(I_mul, h, dh) + _per_head(I_add, h, dh)


def head_cosine(V_raw: Tensor, I_proxy: Tensor, token_mask=None, pooling: str = "per_token") -> Tensor:
    """Cosine between each token's value vector and the proxy, per head.

    Zero-norm vectors give cosine 0. Returns (..., L, h) for ``per_token``
    and (..., 1, h) for ``mean_over_tokens`` (mean over real tokens).
    """
    dot = (V_raw * I_proxy).sum(axis=-1)
    sq = (V_raw * V_raw).sum(axis=-1) * (I_proxy * I_proxy).sum(axis=-1)
    cos = dot / ad.sqrt(ad.maximum(sq, 1e-300))
    if pooling == "per_token":
        return cos
    if token_mask is None:
        return cos.mean(axis=-2, keepdims=True)
    w = np.asarray(token_mask, dtype=float)[..., None]
    return (cos * w).sum(axis=-2, keepdims=True) / w.sum(axis=-2, keepdims=True)


def head_rescale(V_inf, K_inf, V_raw, I_proxy, L_gate, pooling: str = "per_token", token_mask=None):
    """Gate infused V and K per head with ``sigmoid(L_gate + cosine(V_raw, I_proxy))``.

    ``I_proxy`` is (..., h, d_h), or None to drop the cosine term. The same
    gate multiplies both V and K.
    """
    V_inf, K_inf, V_raw, L_gate = map(ad.as_tensor, (V_inf, K_inf, V_raw, L_gate))
    if not (V_inf.shape == K_inf.shape == V_raw.shape):
        raise ShapeError(f"head_rescale: V_inf {V_inf.shape}, K_inf {K_inf.shape}, V_raw {V_raw.shape} differ")
    h, dh = V_raw.shape[-2:]
    if L_gate.shape != (h,):
        raise ShapeError(f"head_rescale: L_gate shape {L_gate.shape} != ({h},)")
    if I_proxy is None:
        shift = L_gate
    else:
        I_proxy = ad.as_tensor(I_proxy)
        if I_proxy.shape[-2:] != (h, dh):
            raise ShapeError(f"head_rescale: I_proxy {I_proxy.shape} does not end in ({h}, {dh})")
        if I_proxy.ndim > 2:
            I_proxy = I_proxy.reshape(*I_proxy.shape[:-2], 1, h, dh)
        shift = L_gate + head_cosine(V_raw, I_proxy, token_mask, pooling)
    gate = ad.sigmoid(shift)
    g = gate.reshape(*gate.shape, 1)
    return V_inf * g, K_inf * g, gate


def infused_attention(Q, K_r, V_r, causal_mask=None, scale_mode: str = "per_head", Wo=None) -> Tensor:
    """Multi-head causal attention on (..., L, h, d_h) inputs -> (..., L, d_T).

    Scale is 1/sqrt(d_h) (``per_head``) or 1/sqrt(d_T) (``paper_literal``).
    Heads are concatenated and, if given, projected by ``Wo``.
    """
    Q, K_r, V_r = map(ad.as_tensor, (Q, K_r, V_r))
    if not (Q.shape == K_r.shape == V_r.shape):
        raise ShapeError(f"infused_attention: Q {Q.shape}, K {K_r.shape}, V {V_r.shape} differ")
    single = Q.ndim == 3
    if single:
        Q, K_r, V_r = (t.reshape(1, *t.shape) for t in (Q, K_r, V_r))
    b, n, h, dh = Q.shape
    if causal_mask is None:
        causal_mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    scale = 1.0 / math.sqrt(dh if scale_mode == "per_head" else h * dh)
    attn = attention_weights(Q, K_r, np.asarray(causal_mask, dtype=bool), scale)
    S = (attn @ V_r.transpose(0, 2, 1, 3)).transpose(0, 2, 1, 3).reshape(b, n, h * dh)
    if Wo is not None:
        S = S @ Wo
    return S[0] if single else S


def infuse_ff(H, I, W_f, b_f) -> Tensor:
    """``H * (I @ W_f + b_f)`` broadcast over tokens; multiplicative only."""
    H = ad.as_tensor(H)
    m = affine_project(I, W_f, b_f)
    if m.shape[-1] != H.shape[-1]:
        raise ShapeError(f"infuse_ff: multiplier width {m.shape[-1]} != hidden width {H.shape[-1]}")
    if m.ndim > 1:
        m = m.reshape(m.shape[0], 1, m.shape[-1])
    return H * m


# --------------------------------------------------------------------------
# parameters and hooks

KV_NAMES = ("w_d_k", "b_d_k", "w_a_k", "b_a_k", "w_d_v", "b_d_v", "w_a_v", "b_a_v")


def infusion_param_count(cfg: MiTConfig, lm: LMConfig) -> int:
    """Closed-form trainable parameter count of the infusion modules."""
    per = 0
    if cfg.enable_kv:
        per += 4 * (cfg.d_I * lm.d_model + lm.d_model)
    if cfg.enable_ff:
        per += cfg.d_I * lm.d_ff + lm.d_ff
    if cfg.enable_rescale:
        per += lm.n_heads
    return per * len(cfg.infused_layers)


@dataclass
class Infusion:
    config: MiTConfig
    lm: LMConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def p(self, layer: int, name: str) -> Tensor:
        return self.params[f"infusion.layer{layer}.{name}"]

    def hooks(self, I, token_mask=None) -> dict:
        """Per-layer hooks conditioning a forward pass on modal embedding(s) ``I``."""
        if not self.config.any_enabled:
            return {}
        I = ad.as_tensor(I)
        if I.shape[-1] != self.config.d_I:
            raise ShapeError(f"modal embedding width {I.shape[-1]} != d_I={self.config.d_I}")
        return {l: InfusedLayer(self, l, I, token_mask) for l in self.config.infused_layers}


class InfusedLayer:
    def __init__(self, infusion: Infusion, layer: int, I: Tensor, token_mask=None):
        self.inf = infusion
        self.layer = layer
        self.I = I
        self.token_mask = token_mask

    def kv(self, q, k, v):
        cfg, p, l = self.inf.config, self.inf.p, self.layer
        proxy = None
        k_inf, v_inf = k, v
        if cfg.enable_kv:
            i_dk = affine_project(self.I, p(l, "w_d_k"), p(l, "b_d_k"))
            i_ak = affine_project(self.I, p(l, "w_a_k"), p(l, "b_a_k"))
            i_dv = affine_project(self.I, p(l, "w_d_v"), p(l, "b_d_v"))
            i_av = affine_project(self.I, p(l, "w_a_v"), p(l, "b_a_v"))
            k_inf = infuse_kv(k, i_dk, i_ak)
            v_inf = infuse_kv(v, i_dv, i_av)
            h, dh = v.shape[-2:]
            proxy = i_dv.reshape(*i_dv.shape[:-1], h, dh)
        if cfg.enable_rescale:
            v_inf, k_inf, _ = head_rescale(v_inf, k_inf, v, proxy, p(l, "l_gate"),
                                           cfg.rescale_pooling, self.token_mask)
        return k_inf, v_inf

    def ff(self, h):
        cfg, l = self.inf.config, self.layer
        if not cfg.enable_ff:
            return h
        return infuse_ff(h, self.I, self.inf.p(l, "w_f"), self.inf.p(l, "b_f"))


def init_infusion(config: MiTConfig, lm: LMConfig, seed: int = 0) -> Infusion:
    """Identity-at-init infusion parameters.

    Projection matrices are zero; multiplier biases are one; adder biases
    are zero; gates start at ``gate_init``. Initialisation is deterministic,
    ``seed`` is accepted for interface symmetry.
    """
    config.validate(lm)
    d_I, d_T, d_ff = config.d_I, lm.d_model, lm.d_ff
    params: dict[str, Tensor] = {}

    def put(layer, name, arr):
        key = f"infusion.layer{layer}.{name}"
        params[key] = ad.parameter(arr, name=key)

    for l in config.infused_layers:
        if config.enable_kv:
            for t in ("k", "v"):
                put(l, f"w_d_{t}", np.zeros((d_I, d_T)))
                put(l, f"b_d_{t}", np.ones(d_T))
                put(l, f"w_a_{t}", np.zeros((d_I, d_T)))
                put(l, f"b_a_{t}", np.zeros(d_T))
        if config.enable_ff:
            put(l, "w_f", np.zeros((d_I, d_ff)))
            put(l, "b_f", np.ones(d_ff))
        if config.enable_rescale:
            put(l, "l_gate", np.full(lm.n_heads, float(config.gate_init)))
    # key order is part of the checkpoint format
    order = {n: i for i, n in enumerate(KV_NAMES + ("w_f", "b_f", "l_gate"))}
    params = dict(sorted(params.items(), key=lambda kv: (int(kv[0].split(".")[1][5:]),
                                                         order[kv[0].split(".")[2]])))
    return Infusion(config, lm, params)
