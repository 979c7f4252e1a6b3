import numpy as np
import pytest

from mitune.infusion import MiTConfig
from mitune.model import PAD_ID, MiTModel, collate, filler_tokens, prompt_for
from mitune.transformer import LMConfig

TINY = LMConfig(n_layers=2, d_model=16, n_heads=2, d_ff=24, vocab=256, max_seq=160)
TINY_MIT = MiTConfig(infused_layers=(1,), d_I=8)


def tiny(task, **kw):
    return MiTModel(task, TINY, TINY_MIT, seed=1, **kw)


def test_collate_layout(small):
    samples = small["seg"].samples[:3]
    b = collate("seg", samples, task_token_id=256, filler=[7, 7])
    for i, s in enumerate(samples):
        p = prompt_for("seg", s)
        n = len(p) + 3
        assert b.lengths[i] == n
        assert b.tokens[i, :len(p)].tolist() == p
        assert b.tokens[i, len(p)] == 256 and b.task_pos[i] == len(p)
        assert b.tokens[i, len(p) + 1:n].tolist() == [7, 7]
        assert (b.tokens[i, n:] == PAD_ID).all() and b.pad_mask[i].sum() == n
    assert b.images.shape == (3, 32, 32, 3) and b.masks.shape == (3, 32, 32)


def test_filler_tokens():
    assert filler_tokens(0) == []
    assert len(filler_tokens(100)) == 100
    with pytest.raises(ValueError):
        filler_tokens(-1)


@pytest.mark.parametrize("task,schema", [("seg", "last_token"), ("cls", "task_token"), ("msa", "last_token"),
                                         ("msa", "task_token")])
def test_batch_equals_single(small, task, schema):
    m = tiny(task, schema=schema)
    samples = small[task].samples[:3]
    together = m.forward(m.collate(samples)).data
    for i, s in enumerate(samples):
        alone = m.forward(m.collate([s])).data[0]
        assert np.allclose(together[i], alone, atol=1e-10)


def test_output_shapes(small):
    assert tiny("seg").forward(tiny("seg").collate(small["seg"].samples[:2])).shape == (2, 32, 32)
    m = tiny("cls", classes=3)
    assert m.forward(m.collate(small["cls"].samples[:2])).shape == (2, 3)
    m = tiny("msa")
    assert m.forward(m.collate(small["msa"].samples[:2])).shape == (2,)


def test_freeze_roles():
    m = tiny("msa")
    frozen = m.frozen()
    assert all(k.startswith("lm.") for k in frozen)
    assert any(k.startswith("encoder.acoustic") for k in m.trainable())
    m = tiny("seg")
    assert all(k.startswith(("lm.", "encoder.image")) for k in m.frozen())
    assert set(m.trainable()) == {k for k in m.parameters() if k.startswith(("infusion.", "head."))}
    assert not any(k.startswith("encoder.") for k in tiny("msa", encoder_trainable=False).trainable())


def test_modality_subsets(small):
    samples = small["msa"].samples[:2]
    none = tiny("msa", modalities=())
    I, _ = none.modal_embedding(none.collate(samples))
    assert np.array_equal(I.data, np.zeros((2, 8)))
    both, a = tiny("msa"), tiny("msa", modalities=("acoustic",))
    Ib, _ = both.modal_embedding(both.collate(samples))
    Ia, _ = a.modal_embedding(a.collate(samples))
    f = both.seq_encoders["facial"].encode(both.collate(samples).facial).pooled.data
    assert np.allclose(Ib.data, Ia.data + f, atol=1e-12)
    with pytest.raises(ValueError):
        tiny("msa", modalities=("smell",))


def test_modal_input_changes_prediction(small):
    m = tiny("seg")
    for t in m.infusion.params.values():
        t.data += np.random.default_rng(0).normal(0, 0.3, t.shape)
    b = m.collate(small["seg"].samples[:1])
    out1 = m.task_embedding(b, np.zeros((1, 8))).data
    out2 = m.task_embedding(b, np.ones((1, 8))).data
    assert not np.allclose(out1, out2)


def test_errors():
    with pytest.raises(ValueError):
        MiTModel("bogus")
    with pytest.raises(ValueError):
        MiTModel("seg", schema="first_token")
