"""Experiment drivers shared by the CLI, scripts and acceptance tests."""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .data import Dataset, gen_dataset
from .infusion import MiTConfig
from .model import MiTModel, filler_tokens
from .rng import generator
from .train import TrainConfig, TrainResult, save_checkpoint, train, trainable_report

AXES = ("kv", "ff", "rescale")


def build_model(cfg: RunConfig, mit: MiTConfig | None = None, lm=None, schema: str | None = None,
                modalities=None) -> MiTModel:
    t = cfg.task
    return MiTModel(t.name, lm or cfg.model, mit or cfg.mit, seed=cfg.seed, schema=schema or t.schema,
                    modalities=tuple(t.modalities if modalities is None else modalities),
                    classes=t.classes, decoder_width=t.decoder_width, encoder_trainable=t.encoder_trainable)


def dataset_for(cfg: RunConfig) -> Dataset:
    return gen_dataset(cfg.task.name, cfg.data.n, cfg.data_seed)


def write_history(history: list[dict], path) -> None:
    keys = list(history[0]) if history else ["epoch"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(history)


def run_training(cfg: RunConfig, dataset: Dataset, out_dir=None, model: MiTModel | None = None,
                 log=None, tcfg: TrainConfig | None = None) -> tuple[MiTModel, TrainResult]:
    """Train on the seeded 90/10 split; optionally persist a run directory."""
    if dataset.task != cfg.task.name:
        raise ValueError(f"dataset task {dataset.task!r} does not match config task {cfg.task.name!r}")
    model = model or build_model(cfg)
    tcfg = tcfg or cfg.train_config()
    tr, te = dataset.split(tcfg.test_fraction)
    filler = filler_tokens(cfg.task.filler) if cfg.task.filler else None
    result = train(model, tr, tcfg, te, log=log, filler=filler)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg.echo(out)
        write_history(result.history, out / "history.csv")
        meta = {"config": cfg.to_dict(), "epoch": len(result.history), "history": result.history,
                "metrics": result.metrics, "dataset_checksum": dataset.checksum()}
        save_checkpoint(out / "checkpoint", model, meta)
        (out / "trainable.json").write_text(json.dumps(trainable_report(model), indent=2))
        (out / "metrics.json").write_text(json.dumps(result.metrics, indent=2))
    return model, result


# --------------------------------------------------------------------------
# ablations


def ablation_variants(axes=AXES):
    """All 2^len(axes) on/off combinations, all-on first."""
    axes = tuple(axes)
    bad = sorted(set(axes) - set(AXES))
    if bad:
        raise ValueError(f"unknown ablation axes {bad}; choose from {AXES}")
    for bits in itertools.product((True, False), repeat=len(axes)):
        yield dict(zip(axes, bits))


def mit_variant(base: MiTConfig, flags: dict) -> MiTConfig:
    return replace(base, enable_kv=flags.get("kv", base.enable_kv), enable_ff=flags.get("ff", base.enable_ff),
                   enable_rescale=flags.get("rescale", base.enable_rescale))


def _train_variant(cfg: RunConfig, mit: MiTConfig, dataset: Dataset) -> dict:
    return run_training(cfg, dataset, model=build_model(cfg, mit))[1].metrics


def ablate(cfg: RunConfig, axes=AXES, seeds=None, dataset_by_seed=None, train_models: bool = True,
           log=None, runner=_train_variant) -> list[dict]:
    """One row per variant: trainable counts and seed-averaged metrics.

    ``runner(cfg, mit, dataset) -> metrics`` trains one variant; callers may
    swap in a memoised version to share runs between studies.
    """
    seeds = list(seeds or [cfg.seed])
    rows = []
    for flags in ablation_variants(axes):
        mit = mit_variant(cfg.mit, flags)
        row = {**{a: flags[a] for a in flags}}
        per_seed = []
        for s in seeds:
            c = replace(cfg, seed=s)
            model = build_model(c, mit)
            rep = trainable_report(model)
            row["infusion_params"] = rep["components"]["infusion"]["trainable"]
            row["trainable"] = rep["trainable"]
            if not train_models:
                break
            ds = dataset_by_seed[s] if dataset_by_seed else gen_dataset(c.task.name, c.data.n, c.data_seed)
            metrics = runner(c, mit, ds)
            per_seed.append(metrics)
            if log:
                log({**row, "seed": s, **metrics})
        if per_seed:
            for k in per_seed[0]:
                row[k] = float(np.mean([m[k] for m in per_seed]))
        rows.append(row)
    return rows


def write_rows(rows: list[dict], path) -> None:
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


# --------------------------------------------------------------------------
# schema sweep and modality study


def schema_sweep(cfg: RunConfig, lengths, seeds=None, log=None) -> list[dict]:
    """Last-token vs task-token heads with k filler tokens after the prompt."""
    seeds = list(seeds or [cfg.seed])
    rows = []
    for k in lengths:
        row = {"filler": int(k)}
        for schema in ("last_token", "task_token"):
            vals = []
            for s in seeds:
                c = replace(cfg, seed=s, task=replace(cfg.task, schema=schema, filler=int(k)))
                need = _max_prompt(c) + int(k) + 1
                lm = c.model if need <= c.model.max_seq else replace(c.model, max_seq=need)
                ds = gen_dataset(c.task.name, c.data.n, c.data_seed)
                _, res = run_training(c, ds, model=build_model(c, lm=lm))
                vals.append(res.metrics)
            key = _primary_metric(cfg.task.name)
            row[f"{schema}_{key}"] = float(np.mean([v[key] for v in vals]))
        rows.append(row)
        if log:
            log(row)
    return rows


def _max_prompt(cfg: RunConfig) -> int:
    return {"seg": 72, "cls": 96, "msa": 96}[cfg.task.name]


def _primary_metric(task: str) -> str:
    return {"seg": "dice", "cls": "acc", "msa": "mae"}[task]


MODALITY_SETS = (("acoustic", "facial"), ("acoustic",), ("facial",), ())


def modality_study(cfg: RunConfig, dataset: Dataset | None = None, sets=MODALITY_SETS, log=None) -> list[dict]:
    """Table-style modality ablation for the sentiment task."""
    if cfg.task.name != "msa":
        raise ValueError("modality study needs task.name == 'msa'")
    dataset = dataset or dataset_for(cfg)
    rows = []
    for mods in sets:
        model = build_model(cfg, modalities=mods)
        _, res = run_training(cfg, dataset, model=model)
        row = {"modalities": "+".join(["text", *mods]), **res.metrics}
        rows.append(row)
        if log:
            log(row)
    return rows


# --------------------------------------------------------------------------
# gradient checks


def perturb_trainable(model: MiTModel, seed: int = 0, scale: float = 0.5) -> None:
    """Move infusion tensors off the identity init so every path is exercised.

    Heads and encoders are already randomly initialised and stay as they are.
    """
    rng = generator(seed, "gradcheck-perturb")
    for name, t in model.infusion.params.items():
        if name.endswith("l_gate"):
            t.data[...] = rng.normal(0.0, 1.0, t.shape)
        else:
            t.data += rng.normal(0.0, scale, t.shape)


def gradcheck_model(model: MiTModel, samples: list[dict], step: float = 1e-5, tol: float = 1e-4,
                    max_entries: int | None = 12, seed: int = 0, mode: str = "tensor") -> ad.GradCheckReport:
    batch = model.collate(samples)
    params = list(model.trainable().values())
    return ad.grad_check(lambda: model.loss(batch), params, step=step, tol=tol,
                         max_entries=max_entries, seed=seed, mode=mode)
