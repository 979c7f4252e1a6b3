"""Frozen decoder-only transformer with per-layer K/V and FF hook points.

Architecture (LLaMA-style, minus rotary): learned absolute position
embeddings added at the input, pre-norm residual blocks with RMSNorm
(learned-scale, frozen at ones), causal multi-head attention, SwiGLU
feed-forward ``silu(x Wg) * (x Wu) -> Wd`` and a final RMSNorm before the
untied output head. Weights are random (seeded) and never trained.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Protocol

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .rng import generator

LLAMA_FF_RATIO = 11008 / 4096


@dataclass
class LMConfig:
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 172
    vocab: int = 256
    max_seq: int = 128
    attn_scale_mode: str = "per_head"  # or "paper_literal": 1/sqrt(d_model)
    learned_pos: bool = True
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.attn_scale_mode not in ("per_head", "paper_literal"):
            raise ValueError(f"unknown attn_scale_mode {self.attn_scale_mode!r}")
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab", "max_seq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def attn_scale(self) -> float:
        d = self.d_head if self.attn_scale_mode == "per_head" else self.d_model
        return 1.0 / math.sqrt(d)

    @staticmethod
    def default_d_ff(d_model: int) -> int:
        return round(d_model * LLAMA_FF_RATIO)

    @classmethod
    def toy(cls, **overrides) -> "LMConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls) -> "LMConfig":
        # LLaMA-7B dims; only used for closed-form accounting, never built.
        return cls(n_layers=32, d_model=4096, n_heads=32, d_ff=11008, vocab=32000,
                   max_seq=4096, learned_pos=False, norm_eps=1e-6)


def lm_param_count(cfg: LMConfig) -> int:
    """Closed-form parameter count of :class:`MicroLM` for ``cfg``."""
    d, f = cfg.d_model, cfg.d_ff
    per_layer = 4 * d * d + 3 * d * f + 2 * d
    total = cfg.vocab * d + cfg.n_layers * per_layer + d + d * cfg.vocab
    if cfg.learned_pos:
        total += cfg.max_seq * d
    return total


class LayerHook(Protocol):
    def kv(self, q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]: ...

    def ff(self, h: Tensor) -> Tensor: ...


@dataclass
class LayerTap:
    layer_index: int
    q: Tensor
    k: Tensor
    v: Tensor
    ff_hidden: Tensor
    attn: Tensor


@dataclass
class LMOutput:
    hidden: Tensor
    logits: Tensor
    taps: list[LayerTap] = field(default_factory=list)


class MicroLM:
    """Random, frozen decoder-only transformer."""

    def __init__(self, config: LMConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        rng = generator(seed, "lm")
        d, f, v = config.d_model, config.d_ff, config.vocab

        def w(*shape, std):
            return rng.normal(0.0, std, size=shape)

        weights: dict[str, np.ndarray] = {"lm.tok_emb": w(v, d, std=1.0)}
        if config.learned_pos:
            # own stream: other weights and leading rows are independent of max_seq
            weights["lm.pos_emb"] = generator(seed, "lm", "pos").normal(0.0, 0.5, size=(config.max_seq, d))
        for i in range(config.n_layers):
            p = f"lm.layer{i}."
            weights[p + "attn_norm"] = np.ones(d)
            for name in ("wq", "wk", "wv", "wo"):
                weights[p + name] = w(d, d, std=d**-0.5)
            weights[p + "ff_norm"] = np.ones(d)
            weights[p + "w_gate"] = w(d, f, std=d**-0.5)
            weights[p + "w_up"] = w(d, f, std=d**-0.5)
            weights[p + "w_down"] = w(f, d, std=f**-0.5)
        weights["lm.final_norm"] = np.ones(d)
        weights["lm.head"] = w(d, v, std=d**-0.5)
        self.params = {k: Tensor(a, requires_grad=False, name=k) for k, a in weights.items()}
        for t in self.params.values():
            t.data.setflags(write=False)

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self.params.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    # ------------------------------------------------------------------

    def forward(
        self,
        tokens,
        hooks: Mapping[int, LayerHook] | None = None,
        *,
        pad_mask: np.ndarray | None = None,
        extra_embeddings: Tensor | None = None,
        prefix: Tensor | None = None,
        return_taps: bool = False,
    ) -> LMOutput:
        """Run the model on ``tokens`` of shape ``(L,)`` or ``(B, L)``.

        ``pad_mask`` marks real tokens (True) vs padding (False); padded keys
        are excluded from attention. Ids ``>= vocab`` index rows of
        ``extra_embeddings`` (learnable task tokens). ``prefix`` of shape
        ``(B, P, d_model)`` is prepended as extra positions (the prefix-token
        baseline); its positions are included in the returned hidden states.
        """
        cfg = self.config
        tokens = np.asarray(tokens)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None, :]
            if pad_mask is not None:
                pad_mask = np.asarray(pad_mask)[None, :]
        if tokens.ndim != 2 or tokens.shape[1] == 0:
            raise ShapeError(f"tokens must be a non-empty (B, L) array, got shape {tokens.shape}")
        n_extra = 0 if extra_embeddings is None else extra_embeddings.shape[0]
        if tokens.min() < 0 or tokens.max() >= cfg.vocab + n_extra:
            bad = tokens[(tokens < 0) | (tokens >= cfg.vocab + n_extra)]
            raise ValueError(f"token id {int(bad[0])} out of range [0, {cfg.vocab + n_extra})")
        b, n_tok = tokens.shape
        n_prefix = 0 if prefix is None else prefix.shape[1]
        n = n_tok + n_prefix
        if n > cfg.max_seq:
            raise ValueError(f"sequence length {n} exceeds max_seq={cfg.max_seq}")

        table = self["lm.tok_emb"]
        if extra_embeddings is not None:
            table = ad.concat([table, extra_embeddings], axis=0)
        x = ad.take_rows(table, tokens)
        if prefix is not None:
            if prefix.shape[0] != b or prefix.shape[2] != cfg.d_model:
                raise ShapeError(f"prefix shape {prefix.shape} incompatible with batch {b}, d={cfg.d_model}")
            x = ad.concat([prefix, x], axis=1)
        if cfg.learned_pos:
            x = x + self["lm.pos_emb"][:n]

        masked = np.triu(np.ones((n, n), dtype=bool), k=1)[None, None]
        if pad_mask is not None:
            keys = np.asarray(pad_mask, dtype=bool)
            if keys.shape != (b, n_tok):
                raise ShapeError(f"pad_mask shape {keys.shape} != tokens shape {(b, n_tok)}")
            if n_prefix:
                keys = np.concatenate([np.ones((b, n_prefix), dtype=bool), keys], axis=1)
            masked = masked | ~keys[:, None, None, :]

        taps: list[LayerTap] = []
        hooks = hooks or {}
        for i in range(cfg.n_layers):
            x, tap = self._block(i, x, masked, hooks.get(i), return_taps)
            if tap is not None:
                taps.append(tap)
        hidden = ad.rms_norm(x, self["lm.final_norm"], cfg.norm_eps)
        logits = hidden @ self["lm.head"]
        if single:
            hidden, logits = hidden[0], logits[0]
        return LMOutput(hidden, logits, taps)

    __call__ = forward

    def _block(self, i: int, x: Tensor, masked: np.ndarray, hook, return_taps: bool):
        cfg = self.config
        p = f"lm.layer{i}."
        b, n, d = x.shape
        hdim = (b, n, cfg.n_heads, cfg.d_head)

        h = ad.rms_norm(x, self[p + "attn_norm"], cfg.norm_eps)
        q = (h @ self[p + "wq"]).reshape(hdim)
        k = (h @ self[p + "wk"]).reshape(hdim)
        v = (h @ self[p + "wv"]).reshape(hdim)
        if hook is not None:
            k, v = hook.kv(q, k, v)
            for name, t in (("K", k), ("V", v)):
                if t.shape != hdim:
                    raise ShapeError(f"layer {i} hook returned {name} of shape {t.shape}, expected {hdim}")

        attn = attention_weights(q, k, masked, cfg.attn_scale)
        ctx = attn @ v.transpose(0, 2, 1, 3)
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, n, d)
        x = x + ctx @ self[p + "wo"]

        h = ad.rms_norm(x, self[p + "ff_norm"], cfg.norm_eps)
        act = ad.silu(h @ self[p + "w_gate"]) * (h @ self[p + "w_up"])
        if hook is not None:
            new = hook.ff(act)
            if new.shape != act.shape:
                raise ShapeError(f"layer {i} hook returned FF hidden of shape {new.shape}, expected {act.shape}")
            act = new
        x = x + act @ self[p + "w_down"]
        tap = LayerTap(i, q, k, v, act, attn) if return_taps else None
        return x, tap


def attention_weights(q: Tensor, k: Tensor, masked: np.ndarray, scale: float) -> Tensor:
    """Softmax attention map ``(B, h, L, L)`` from ``(B, L, h, d_h)`` queries/keys."""
    scores = ad.matmul(q.transpose(0, 2, 1, 3), k.transpose(0, 2, 3, 1), tag="attn_scores")
    return ad.masked_softmax(scores, masked, scale)


def last_token_embedding(hidden: Tensor, lengths=None) -> Tensor:
    """Hidden state of the final real token.

    ``hidden`` is ``(L, d)`` or ``(B, L, d)``; for batches ``lengths`` gives
    each row's true token count (defaults to the full length).
    """
    if hidden.ndim == 2:
        if hidden.shape[0] < 1:
            raise ShapeError("empty sequence has no last token")
        return hidden[hidden.shape[0] - 1]
    b, n, _ = hidden.shape
    lengths = np.full(b, n) if lengths is None else np.asarray(lengths)
    if (lengths < 1).any() or (lengths > n).any():
        raise ShapeError(f"lengths {lengths.tolist()} invalid for sequence length {n}")
    return hidden[np.arange(b), lengths - 1]


@dataclass
class ParamCount:
    total: int
    trainable: int

    @property
    def fraction(self) -> float:
        return self.trainable / self.total if self.total else 0.0


def count_params(*collections) -> ParamCount:
    """Count scalar entries across models / name->Tensor mappings / tensors."""
    seen: dict[int, Tensor] = {}
    for c in collections:
        if hasattr(c, "params"):
            c = c.params
        items = c.values() if isinstance(c, Mapping) else c
        for t in items:
            seen[id(t)] = t
    total = sum(t.size for t in seen.values())
    trainable = sum(t.size for t in seen.values() if t.requires_grad)
    return ParamCount(total, trainable)
