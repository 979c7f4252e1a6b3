import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mitune import autodiff as ad
from mitune.autodiff import ShapeError, Tensor
from mitune.transformer import LMConfig, MicroLM, count_params, last_token_embedding, lm_param_count

SMALL = LMConfig(n_layers=2, d_model=8, n_heads=2, d_ff=LMConfig.default_d_ff(8), vocab=16, max_seq=16)


def straight_line_forward(lm: MicroLM, tokens):
    """Independent float64 forward with explicit per-head loops."""
    cfg, W = lm.config, {k: t.data for k, t in lm.params.items()}
    n, d, h = len(tokens), cfg.d_model, cfg.n_heads
    dh = d // h

    def rms(x, g):
        return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + cfg.norm_eps) * g

    x = W["lm.tok_emb"][tokens] + W["lm.pos_emb"][:n]
    for i in range(cfg.n_layers):
        p = f"lm.layer{i}."
        z = rms(x, W[p + "attn_norm"])
        q, k, v = z @ W[p + "wq"], z @ W[p + "wk"], z @ W[p + "wv"]
        ctx = np.zeros((n, d))
        for j in range(h):
            sl = slice(j * dh, (j + 1) * dh)
            for t in range(n):
                s = np.array([q[t, sl] @ k[u, sl] / math.sqrt(dh) for u in range(t + 1)])
                a = np.exp(s - s.max())
                a /= a.sum()
                ctx[t, sl] = sum(a[u] * v[u, sl] for u in range(t + 1))
        x = x + ctx @ W[p + "wo"]
        z = rms(x, W[p + "ff_norm"])
        g = z @ W[p + "w_gate"]
        x = x + (g / (1 + np.exp(-g)) * (z @ W[p + "w_up"])) @ W[p + "w_down"]
    return rms(x, W["lm.final_norm"]) @ W["lm.head"]


class IdentityHook:
    def kv(self, q, k, v):
        return k, v

    def ff(self, h):
        return h


def test_forward_matches_straight_line_oracle():
    lm = MicroLM(SMALL, seed=3)
    tokens = np.array([1, 5, 9, 2, 15, 0, 7])
    got = lm.forward(tokens).logits.data
    assert np.max(np.abs(got - straight_line_forward(lm, tokens))) < 1e-10


def test_identity_hook_bit_identical():
    lm = MicroLM(SMALL, seed=1)
    tokens = np.array([3, 4, 5, 6])
    base = lm.forward(tokens).logits.data
    hooked = lm.forward(tokens, {0: IdentityHook(), 1: IdentityHook()}).logits.data
    assert np.array_equal(base, hooked)


def test_single_token_attention_is_one():
    out = MicroLM(SMALL).forward(np.array([4]), return_taps=True)
    for tap in out.taps:
        assert np.array_equal(tap.attn.data[0, :, :, :], np.ones((2, 1, 1)))


def test_forward_errors():
    lm = MicroLM(SMALL)
    with pytest.raises(ValueError, match="out of range"):
        lm.forward(np.array([1, 16]))

    class Bad(IdentityHook):
        def kv(self, q, k, v):
            return k[:, :1], v

    with pytest.raises(ShapeError, match=r"layer 1.*K"):
        lm.forward(np.array([1, 2, 3]), {1: Bad()})
    with pytest.raises(ValueError, match="max_seq"):
        lm.forward(np.zeros(17, dtype=int))


def test_causality():
    lm = MicroLM(SMALL, seed=2)
    a = lm.forward(np.array([1, 2, 3, 4, 5])).logits.data
    b = lm.forward(np.array([1, 2, 3, 9, 11])).logits.data
    assert np.array_equal(a[:3], b[:3])
    assert not np.allclose(a[3:], b[3:])


def test_padding_is_invisible():
    lm = MicroLM(SMALL, seed=4)
    short = lm.forward(np.array([7, 8, 9])).hidden.data
    tokens = np.array([[7, 8, 9, 0, 0], [1, 2, 3, 4, 5]])
    pad = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], bool)
    batched = lm.forward(tokens, pad_mask=pad).hidden
    assert np.allclose(batched.data[0, :3], short, atol=1e-12)
    emb = last_token_embedding(batched, lengths=[3, 5]).data
    assert np.allclose(emb[0], short[2], atol=1e-12)


def test_lm_is_frozen_and_readonly():
    lm = MicroLM(SMALL)
    assert lm.frozen
    with pytest.raises(ValueError):
        lm["lm.head"].data[0, 0] = 1.0


def test_pos_emb_rows_independent_of_max_seq():
    a = MicroLM(SMALL, seed=5)
    b = MicroLM(LMConfig(**{**SMALL.__dict__, "max_seq": 32}), seed=5)
    assert np.array_equal(a["lm.pos_emb"].data, b["lm.pos_emb"].data[:16])
    assert np.array_equal(a["lm.layer1.wv"].data, b["lm.layer1.wv"].data)


def test_last_token_examples():
    assert np.array_equal(last_token_embedding(Tensor([[1.0, 2.0], [3.0, 4.0]])).data, [3.0, 4.0])
    assert np.array_equal(last_token_embedding(Tensor([[1.0, 2.0]])).data, [1.0, 2.0])
    h = np.random.default_rng(0).normal(size=(5, 8))
    assert np.array_equal(last_token_embedding(Tensor(h)).data, h[4])


def test_last_token_errors():
    h = Tensor(np.ones((2, 3, 4)))
    with pytest.raises(ShapeError):
        last_token_embedding(h, lengths=[0, 3])
    with pytest.raises(ShapeError):
        last_token_embedding(h, lengths=[4, 1])


def test_count_params_frozen_model():
    c = count_params(MicroLM(SMALL))
    assert c.trainable == 0 and c.fraction == 0.0
    assert c.total == lm_param_count(SMALL)


def test_paper_preset_param_count():
    # LLaMA-7B dims without rotary tables
    assert lm_param_count(LMConfig.paper()) == 6_738_415_616


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 40), st.integers(2, 40),
       st.integers(1, 20), st.booleans())
def test_closed_form_equals_enumeration(layers, heads, dh, ff, vocab, max_seq, learned_pos):
    cfg = LMConfig(n_layers=layers, d_model=heads * dh, n_heads=heads, d_ff=ff, vocab=vocab,
                   max_seq=max_seq, learned_pos=learned_pos)
    assert count_params(MicroLM(cfg)).total == lm_param_count(cfg)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8))
def test_batch_rows_match_single_forward(seed, n):
    lm = MicroLM(SMALL, seed=seed % 7)
    toks = np.random.default_rng(seed).integers(0, 16, size=(2, n))
    batched = lm.forward(toks).logits.data
    for i in range(2):
        assert np.allclose(batched[i], lm.forward(toks[i]).logits.data, atol=1e-12)


def test_gradient_reaches_only_trainable_leaves():
    lm = MicroLM(SMALL)
    extra = ad.parameter(np.random.default_rng(0).normal(size=(1, 8)))
    out = lm.forward(np.array([1, 2, 16]), extra_embeddings=extra)
    out.logits.sum().backward()
    assert extra.grad is not None and np.abs(extra.grad).sum() > 0
    assert all(t.grad is None for t in lm.params.values())
