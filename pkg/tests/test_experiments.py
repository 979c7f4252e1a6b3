from dataclasses import replace

import numpy as np
import pytest

from mitune import config as config_mod
from mitune.experiments import (ablate, ablation_variants, build_model, gradcheck_model, mit_variant,
                                perturb_trainable, schema_sweep)
from mitune.infusion import MiTConfig, infusion_param_count
from mitune.transformer import LMConfig

TINY = {"seed": 3,
        "model": {"n_layers": 2, "d_model": 16, "n_heads": 2, "d_ff": 24, "max_seq": 200},
        "infusion": {"infused_layers": [1], "d_I": 8},
        "train": {"epochs": 1, "batch_size": 4},
        "data": {"n": 10}}


def test_variants_order_and_count():
    v = list(ablation_variants())
    assert len(v) == 8 and v[0] == {"kv": True, "ff": True, "rescale": True}
    assert v[-1] == {"kv": False, "ff": False, "rescale": False}
    assert len(list(ablation_variants(["ff"]))) == 2
    with pytest.raises(ValueError):
        list(ablation_variants(["kv", "lora"]))


def test_ablate_dry_run_parameter_deltas():
    cfg = config_mod.RunConfig()
    rows = ablate(cfg, train_models=False)
    full = rows[0]["infusion_params"]
    lm, mit = cfg.model, cfg.mit
    n, d, f, h, dI = len(mit.infused_layers), lm.d_model, lm.d_ff, lm.n_heads, mit.d_I
    axis_cost = {"kv": n * 4 * (dI * d + d), "ff": n * (dI * f + f), "rescale": n * h}
    for r in rows:
        flags = {a: r[a] for a in ("kv", "ff", "rescale")}
        assert r["infusion_params"] == infusion_param_count(mit_variant(mit, flags), lm)
        if sum(not x for x in flags.values()) == 1:
            off = next(a for a, x in flags.items() if not x)
            assert full - r["infusion_params"] == axis_cost[off]
            assert rows[0]["trainable"] - r["trainable"] == axis_cost[off]
    assert rows[-1]["infusion_params"] == 0


def test_ablate_trains_and_averages():
    cfg = config_mod.from_dict(TINY)
    rows = ablate(cfg, ["ff"], seeds=[3, 4])
    assert len(rows) == 2 and {"dice", "oiou"} <= set(rows[0])


def test_schema_sweep_extends_context():
    cfg = config_mod.from_dict({**TINY, "model": {**TINY["model"], "max_seq": 60}})
    rows = schema_sweep(cfg, [0, 40])
    assert [r["filler"] for r in rows] == [0, 40]
    assert {"last_token_dice", "task_token_dice"} <= set(rows[0])


@pytest.mark.parametrize("task", ["seg", "cls", "msa"])
@pytest.mark.parametrize("schema", ["last_token", "task_token"])
def test_gradcheck_model_small(small, task, schema):
    cfg = config_mod.from_dict({**TINY, "task": {"name": task, "schema": schema}})
    model = build_model(cfg)
    perturb_trainable(model, 0)
    rep = gradcheck_model(model, small[task].samples[:2], max_entries=4)
    assert rep.passed, rep.per_param
    assert set(rep.per_param) == set(model.trainable())
    assert all(v == 0.0 for v in rep.frozen_grad.values())


def test_perturb_only_touches_infusion():
    cfg = config_mod.from_dict(TINY)
    a, b = build_model(cfg), build_model(cfg)
    perturb_trainable(b, 1)
    for k, t in a.parameters().items():
        same = np.array_equal(t.data, b.parameters()[k].data)
        assert same == (not k.startswith("infusion."))
