"""Closed-form cost counters and instrumented measurements.

Modes: ``base`` (frozen LM alone), ``mit`` (infused LM, same token count) and
``prefix`` (P modal tokens prepended to the sequence).

FLOP convention: 2*m*n*k per (m x n) @ (n x k) matmul, 1 per element-wise
output, 5 per softmax element. RMSNorm counts 4 per element.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .infusion import MiTConfig
from .transformer import LMConfig, MicroLM

MODES = ("base", "mit", "prefix")
PAPER_TFLOPS = 0.47


def _check(L: int, mode: str, P: int) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if L < 1:
        raise ValueError("L_tok must be >= 1")
    if P < 0:
        raise ValueError("prefix length P must be >= 0")


def _seq_len(L: int, mode: str, P: int) -> int:
    return L + P if mode == "prefix" else L


def attn_map_elements(cfg: LMConfig, L: int, mode: str = "base", P: int = 0) -> int:
    """Attention-map entries over all layers and heads for one sequence."""
    _check(L, mode, P)
    n = _seq_len(L, mode, P)
    return cfg.n_layers * cfg.n_heads * n * n


# --------------------------------------------------------------------------
# FLOPs


def layer_flops(cfg: LMConfig, n: int) -> int:
    """Forward FLOPs of one frozen transformer block on n tokens."""
    d, f, h = cfg.d_model, cfg.d_ff, cfg.n_heads
    norms = 2 * 4 * n * d
    proj = 4 * 2 * n * d * d
    attn = 2 * (2 * n * n * d) + h * n * n * (1 + 5)  # QK^T, AV, scale, softmax
    ff = 3 * 2 * n * d * f + 2 * n * f  # gate/up/down, SiLU, product
    resid = 2 * n * d
    return norms + proj + attn + ff + resid


def forward_flops(cfg: LMConfig, n: int, include_head: bool = True) -> int:
    """Frozen-LM forward FLOPs on n positions (embedding lookup is free)."""
    total = sum(layer_flops(cfg, n) for _ in range(cfg.n_layers))
    total += n * cfg.d_model if cfg.learned_pos else 0
    total += 4 * n * cfg.d_model  # final norm
    if include_head:
        total += 2 * n * cfg.d_model * cfg.vocab
    return total


@dataclass
class Overhead:
    token_independent: int
    token_dependent: int

    @property
    def total(self) -> int:
        return self.token_independent + self.token_dependent


def mit_overhead(cfg: LMConfig, mit: MiTConfig, L: int) -> Overhead:
    """Extra FLOPs of infusion on top of the base forward."""
    d, f, h, dI = cfg.d_model, cfg.d_ff, cfg.n_heads, mit.d_I
    ind = dep = 0
    for _ in mit.infused_layers:
        if mit.enable_kv:
            ind += 4 * (2 * dI * d + d)  # I_d^k, I_a^k, I_d^v, I_a^v
            dep += 2 * 2 * L * d  # multiply + add on K and V
        if mit.enable_ff:
            ind += 2 * dI * f + f
            dep += L * f
        if mit.enable_rescale:
            if mit.enable_kv:
                ind += 2 * d + h  # proxy norms
                dep += 2 * 2 * L * d  # dot products and value norms
                dep += 6 * L * h  # norm product, clamp, sqrt, divide, shift, sigmoid
            else:
                ind += h  # sigmoid of the bare gate logits
            dep += 2 * L * d  # gate applied to V and K
    return Overhead(ind, dep)


def conditioning_overhead_flops(cfg: LMConfig, L: int, mode: str = "mit", mit: MiTConfig | None = None,
                                P: int = 0) -> Overhead:
    """FLOPs(mode) - FLOPs(base) split into token-independent and -dependent parts.

    For ``prefix`` the whole difference depends on the sequence, so it is
    reported as token-dependent (the modal encoder producing the prefix is
    not counted in either mode).
    """
    _check(L, mode, P)
    if mode == "base":
        return Overhead(0, 0)
    if mode == "mit":
        return mit_overhead(cfg, mit or MiTConfig(), L)
    return Overhead(0, forward_flops(cfg, L + P) - forward_flops(cfg, L))


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ValueError("log-log fit needs positive values")
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


# --------------------------------------------------------------------------
# activations


def activation_floats(cfg: LMConfig, L: int, mode: str = "base", mit: MiTConfig | None = None,
                      P: int = 0) -> dict[str, int]:
    """Closed-form count of floats materialised by one B=1 forward pass.

    Counts every non-view op output of the implementation, grouped by kind.
    """
    _check(L, mode, P)
    d, f, h, V = cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.vocab
    n = _seq_len(L, mode, P)
    per_layer_attn_map = 2 * h * n * n  # scores + probabilities
    # merging heads copies unless the transposed context is already contiguous
    merge = n * d if (n > 1 and h > 1) else 0
    per_layer_rest = 10 * n * d + merge + 4 * n * f
    out = {
        "embedding": L * d + (n * d if mode == "prefix" and P else 0) + (n * d if cfg.learned_pos else 0),
        "attn_map": cfg.n_layers * per_layer_attn_map,
        "layers": cfg.n_layers * per_layer_rest,
        "output": n * d + n * V,
        "infusion": 0,
    }
    if mode == "mit":
        mit = mit or MiTConfig()
        per = 0
        if mit.enable_kv:
            per += 4 * 2 * d + 4 * n * d
        if mit.enable_rescale:
            if mit.enable_kv:
                if mit.rescale_pooling != "per_token":
                    raise ValueError("activation_floats models per_token pooling only")
                per += 4 * n * d + d + h + 8 * h * n
            else:
                per += 2 * n * d + h
        if mit.enable_ff:
            per += 2 * f + n * f
        out["infusion"] = per * len(mit.infused_layers)
    out["total"] = sum(out.values())
    return out


@dataclass
class ActivationMeasurement:
    total: int
    attn_map: int
    by_op: dict[str, int]
    trials: list[int]


def measure_peak_activation(cfg: LMConfig, L: int, mode: str = "base", mit: MiTConfig | None = None,
                            P: int = 0, trials: int = 3, seed: int = 0) -> ActivationMeasurement:
    """Instrumented float count of a no-grad B=1 forward pass.

    Infusion parameters are perturbed away from their identity init so every
    path executes with non-trivial values (counts do not depend on values).
    """
    _check(L, mode, P)
    if trials < 1:
        raise ValueError("trials must be >= 1")
    mit = mit or MiTConfig()
    lm = MicroLM(cfg, seed)
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, cfg.vocab, size=(1, L))
    hooks = None
    if mode == "mit":
        from .infusion import init_infusion
        inf = init_infusion(mit, cfg, seed)
        for t in inf.params.values():
            t.data += rng.normal(0, 0.01, t.shape)
        hooks = inf.hooks(rng.normal(size=(1, mit.d_I)))
    prefix = ad.Tensor(rng.normal(size=(1, P, cfg.d_model))) if mode == "prefix" and P else None
    counts, last = [], None
    for _ in range(trials):
        with ad.no_grad(), ad.track_allocations() as log:
            lm.forward(tokens, hooks, prefix=prefix)
        counts.append(log.total)
        last = log
    attn = last.floats["attn_scores"] + last.floats["attn_softmax"]
    return ActivationMeasurement(counts[-1], int(attn), dict(last.floats), counts)


# --------------------------------------------------------------------------
# sweeps and reports


def sweep(cfg: LMConfig, lengths, mit: MiTConfig | None = None, prefix_tokens: int | None = None,
          measure: bool = False) -> list[dict]:
    """Rows {mode, L_tok, P, attn_elems, overhead_flops, peak_floats}.

    ``prefix_tokens=None`` uses P = L_tok for the prefix rows.
    """
    mit = mit or MiTConfig()
    rows = []
    for L in lengths:
        for mode in MODES:
            P = (L if prefix_tokens is None else prefix_tokens) if mode == "prefix" else 0
            peak = ""
            if measure:
                if _seq_len(L, mode, P) > cfg.max_seq:
                    cfg_m = LMConfig(**{**cfg.__dict__, "max_seq": _seq_len(L, mode, P)})
                else:
                    cfg_m = cfg
                peak = measure_peak_activation(cfg_m, L, mode, mit, P, trials=1).total
            rows.append({"mode": mode, "L_tok": L, "P": P,
                         "attn_elems": attn_map_elements(cfg, L, mode, P),
                         "overhead_flops": conditioning_overhead_flops(cfg, L, mode, mit, P).total,
                         "peak_floats": peak})
    return rows


def write_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["mode", "L_tok", "P", "attn_elems", "overhead_flops", "peak_floats"])
        w.writeheader()
        w.writerows(rows)


def paper_scale_estimate(L_tok: int = 32, cfg: LMConfig | None = None) -> dict:
    """Analytic forward TFLOPs at 7B scale next to the published 0.47 figure.

    Informational only: the published figure does not state its sequence
    length or counting convention.
    """
    cfg = cfg or LMConfig.paper()
    mit = MiTConfig.paper(cfg)
    per_layer = [layer_flops(cfg, L_tok) for _ in range(cfg.n_layers)]
    base = forward_flops(cfg, L_tok)
    over = mit_overhead(cfg, mit, L_tok)
    return {
        "L_tok": L_tok,
        "n_layers": cfg.n_layers,
        "base_tflops": base / 1e12,
        "mit_tflops": (base + over.total) / 1e12,
        "layer_sum_tflops": sum(per_layer) / 1e12,
        "published_tflops": PAPER_TFLOPS,
        "convention": "forward only, batch 1, 2mnk per matmul, 1/elementwise, 5/softmax element",
    }
