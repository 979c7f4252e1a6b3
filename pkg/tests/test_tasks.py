import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mitune import autodiff as ad
from mitune.autodiff import ShapeError, Tensor
from mitune.encoders import ImageEncoder
from mitune.tasks import (ClsHead, RegHead, SegDecoder, TaskTokenTable, bilinear_matrix, ce_loss, cls_metrics, dice_loss,
                          extract_embedding, find_token, format_prompt, msa_metrics, read_pgm, rmse_loss,
                          seg_decoder_param_count, seg_metrics, template_for, tokenize, write_pgm)
from mitune.transformer import count_params


def test_seg_template_text():
    text = template_for("seg").render(description="red ball")
    assert text == "Segment the red ball according to the text. #Segmentation:"
    assert format_prompt("seg", description="red ball") == tokenize(text)
    assert format_prompt("seg", description="red ball") == format_prompt("seg", description="red ball")


def test_msa_template_contains_utterance_and_missing_slot():
    assert "good movie" in template_for("msa").render(text="good movie")
    with pytest.raises(ValueError, match="missing"):
        template_for("cls").render()
    with pytest.raises(ValueError):
        template_for("bogus")


def test_extract_embedding_examples():
    h = Tensor(np.random.default_rng(0).normal(size=(4, 6)))
    assert np.array_equal(extract_embedding(h).data, h.data[3])
    assert np.array_equal(extract_embedding(h, "task_token", 3).data, extract_embedding(h).data)
    with pytest.raises(ValueError, match="absent"):
        extract_embedding(h, "task_token", None)
    with pytest.raises(ValueError, match="absent"):
        find_token(np.array([[1, 2, 3]]), 300)
    assert find_token(np.array([[1, 300, 2], [300, 0, 0]]), 300).tolist() == [1, 0]


def test_task_token_table():
    t = TaskTokenTable(8, 256, ("<SEG>",))
    assert t.id("<SEG>") == 256 and t.vocab_size == 257 and t.embeddings.requires_grad


def _feats(b=None, size=32, seed=0):
    img = np.random.default_rng(seed).random(((b,) if b else ()) + (size, size, 3))
    return ImageEncoder().encode(img)


@pytest.mark.parametrize("size", [32, 64])
def test_seg_decoder_output_shape(size):
    dec = SegDecoder(16)
    assert dec.decode(np.ones(16), _feats(size=size)).shape == (size, size)
    assert dec.decode(np.ones((2, 16)), _feats(2, size)).shape == (2, size, size)


def test_seg_decoder_conditions_on_text():
    dec, f = SegDecoder(16), _feats()
    rng = np.random.default_rng(1)
    a, b = dec.decode(rng.normal(size=16), f).data, dec.decode(rng.normal(size=16), f).data
    assert not np.allclose(a, b)


def test_seg_decoder_gradient_to_task_embedding():
    dec, f = SegDecoder(6, width=4), _feats()
    emb = ad.parameter(np.random.default_rng(2).normal(size=6), name="emb")
    gt = (np.random.default_rng(3).random((32, 32)) > 0.5).astype(float)
    rep = ad.grad_check(lambda: dice_loss(ad.sigmoid(dec.decode(emb, f)), gt), {"emb": emb, **dec.params},
                        step=1e-5, tol=1e-6, max_entries=6, mode="tensor")
    assert rep.passed, rep.per_param
    assert count_params(dec).total == seg_decoder_param_count(6, width=4)


def test_seg_decoder_shape_error():
    with pytest.raises(ShapeError):
        SegDecoder(16).decode(np.ones(15), _feats())


def test_dice_examples():
    pred = np.array([[0.5, 0.0], [1.0, 0.0]])
    gt = np.array([[1.0, 0.0], [0.0, 0.0]])
    assert abs(dice_loss(pred, gt, eps=0.0).item() - 0.6) < 1e-9
    assert abs(dice_loss(pred, gt).item() - (1 - 1.0 / (2.5 + 1e-6))) < 1e-12
    assert dice_loss(gt, gt).item() < 1e-6
    assert abs(dice_loss(gt, 1.0 - gt).item() - 1.0) < 1e-9
    with pytest.raises(ValueError, match="binary"):
        dice_loss(pred, pred)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dice_symmetric_on_binary_masks(seed):
    rng = np.random.default_rng(seed)
    a, b = (rng.random((2, 5, 5)) > 0.5).astype(float), (rng.random((2, 5, 5)) > 0.5).astype(float)
    assert abs(dice_loss(a, b).item() - dice_loss(b, a).item()) < 1e-12
    assert 0.0 <= dice_loss(a, b).item() <= 1.0


def test_ce_examples():
    for k in (2, 3, 7):
        assert abs(ce_loss(np.zeros((2, k)), np.array([0, 1])).item() - math.log(k)) < 1e-12
    assert ce_loss(np.array([[100.0, 0.0, 0.0]]), np.array([0])).item() < 1e-40
    rng = np.random.default_rng(4)
    z, y = rng.normal(size=(3, 4)), np.array([2, 0, 3])
    oracle = 0.0
    for i in range(3):
        m = max(z[i])
        lse = m + math.log(sum(math.exp(v - m) for v in z[i]))
        oracle += (lse - z[i, y[i]]) / 3
    assert abs(ce_loss(z, y).item() - oracle) < 1e-12
    with pytest.raises(ValueError):
        ce_loss(z, np.array([0, 4, 1]))


def test_rmse_examples():
    assert rmse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0])).item() < 1e-140
    assert abs(rmse_loss(np.array([3.0, -4.0]), np.zeros(2)).item() - math.sqrt(12.5)) < 1e-12
    assert abs(math.sqrt(12.5) - 3.53553) < 1e-5
    with pytest.raises(ValueError):
        rmse_loss(np.zeros(0), np.zeros(0))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-3, 3)), arrays(np.float64, 5, elements=st.floats(-3, 3)),
       st.floats(-5, 5))
def test_rmse_homogeneous(a, b, c):
    lhs = rmse_loss(c * a, c * b).item()
    rhs = abs(c) * rmse_loss(a, b).item()
    assert abs(lhs - rhs) <= 1e-9 * max(1.0, rhs) + 1e-140


def test_loss_gradients():
    rng = np.random.default_rng(5)
    z = ad.parameter(rng.normal(size=(3, 4)), name="z")
    p = ad.parameter(rng.normal(size=5), name="p")
    gt = (rng.random((3, 4)) > 0.5).astype(float)
    for f in (lambda: ce_loss(z, np.array([1, 2, 3])), lambda: dice_loss(ad.sigmoid(z), gt),
              lambda: rmse_loss(p, np.arange(5.0))):
        rep = ad.grad_check(f, [z, p], step=1e-6, tol=1e-6)
        assert rep.passed, rep.per_param


def test_cls_head():
    for k in (2, 3, 101):
        assert ClsHead(8, 4, k)(np.ones(8), np.ones(4)).shape == (k,)
    h = ClsHead(8, 4, 3)
    for t in h.params.values():
        t.data[...] = 0
    assert np.array_equal(h(np.ones(8), np.ones(4)).data, np.zeros(3))
    h = ClsHead(5, 3, 3, seed=1)
    emb, img = ad.parameter(np.ones(5), name="emb"), ad.parameter(np.ones(3), name="img")
    rep = ad.grad_check(lambda: ce_loss(h(emb, img), np.array([1])), {"emb": emb, "img": img, **h.params},
                        step=1e-6, tol=1e-6)
    assert rep.passed and np.abs(emb.grad).sum() > 0 and np.abs(img.grad).sum() > 0


def test_reg_head():
    h = RegHead(6)
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=6), rng.normal(size=6)
    assert abs(h(a + b).item() - h(a).item() - h(b).item()) < 1e-12
    rep = ad.grad_check(lambda: rmse_loss(h(np.stack([a, b])), np.array([1.0, -2.0])), h.params,
                        step=1e-6, tol=1e-6)
    assert rep.passed
    for t in h.params.values():
        t.data[...] = 0
    assert h(a).item() == 0.0


def test_metrics():
    probs = np.array([[[0.9, 0.1], [0.2, 0.8]]])
    gts = np.array([[[1, 0], [0, 0]]])
    m = seg_metrics(probs, gts)
    assert abs(m["dice"] - 2 / 3) < 1e-12 and abs(m["oiou"] - 0.5) < 1e-12
    c = cls_metrics(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]), np.array([0, 1, 1]))
    assert abs(c["acc"] - 2 / 3) < 1e-12
    s = msa_metrics(np.array([1.0, -1.0, 2.0]), np.array([1.5, -1.0, 2.0]))
    assert abs(s["mae"] - 0.5 / 3) < 1e-12 and s["acc2"] == 1.0


def test_pgm_round_trip(tmp_path):
    mask = np.random.default_rng(7).random((32, 32)) > 0.5
    write_pgm(tmp_path / "m.pgm", mask)
    assert np.array_equal(read_pgm(tmp_path / "m.pgm") > 0, mask)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 6), st.floats(-3, 3), st.floats(-3, 3))
def test_bilinear_matrix_partition_and_affine_exactness(n, scale, a, c):
    m = bilinear_matrix(n, scale)
    assert m.shape == (n * scale, n) and (m >= 0).all()
    assert np.allclose(m.sum(axis=1), 1.0)
    # an affine ramp over input centres is reproduced exactly away from the clamped borders
    centres = (np.arange(n * scale) + 0.5) / scale - 0.5
    inner = (centres >= 0) & (centres <= n - 1)
    assert np.allclose((m @ (a * np.arange(n) + c))[inner], (a * centres + c)[inner])
