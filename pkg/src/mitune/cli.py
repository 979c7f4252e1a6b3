"""``mitune`` command line.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import ConfigError, RunConfig
from .cost import attn_map_elements, conditioning_overhead_flops, loglog_slope, paper_scale_estimate, sweep, write_csv
from .data import DataError, gen_dataset, load_dataset, save_dataset
from .experiments import (AXES, ablate, build_model, gradcheck_model, modality_study, perturb_trainable,
                          run_training, schema_sweep, write_rows)
from .model import filler_tokens
from .tasks import write_pgm
from .train import CheckpointError, evaluate, restore, trainable_report


class UsageError(Exception):
    pass


def parse_range(text: str) -> list[int]:
    """``a..b`` (doubling from a, b always included) or ``a,b,c``; an ``L=`` prefix is ignored."""
    text = text.split("=", 1)[1] if "=" in text else text
    try:
        if ".." in text:
            lo, hi = (int(x) for x in text.split(".."))
            if lo < 1 or hi < lo:
                raise ValueError
            out, v = [], lo
            while v < hi:
                out.append(v)
                v *= 2
            return out + [hi]
        vals = [int(x) for x in text.split(",") if x.strip()]
        if not vals or min(vals) < 0:
            raise ValueError
        return vals
    except ValueError:
        raise UsageError(f"cannot parse range {text!r}; use a..b or a,b,c") from None


def _load_config(path) -> RunConfig:
    return config_mod.load(path) if path else RunConfig()


def _fmt(metrics: dict) -> str:
    return " ".join(f"{k}={v:.4f}" for k, v in metrics.items())


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(a) -> int:
    if a.n < 1:
        raise UsageError("--n must be >= 1")
    ds = gen_dataset(a.task, a.n, a.seed, threads=a.threads)
    manifest = save_dataset(ds, a.out)
    print(f"wrote {ds.n} {ds.task} samples to {a.out} checksum={manifest['checksum']}")
    for k, v in ds.stats.items():
        print(f"  {k}={v:.4f}")
    return 0


def cmd_train(a) -> int:
    cfg = _load_config(a.config)
    if a.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=a.epochs))
    ds = load_dataset(a.data)
    if ds.task != cfg.task.name:
        raise UsageError(f"dataset task {ds.task!r} does not match config task {cfg.task.name!r}")
    model = build_model(cfg)
    rep = trainable_report(model)
    print(f"trainable {rep['trainable']} / {rep['total']} ({100 * rep['fraction']:.2f}%)")
    _, res = run_training(cfg, ds, a.out, model=model,
                          log=lambda r: print(f"epoch {r['epoch']:2d} lr={r['lr']:.1e} loss={r['train_loss']:.4f} "
                                              + _fmt({k: v for k, v in r.items() if k.startswith('test_')}),
                                              flush=True))
    print("final " + _fmt(res.metrics))
    return 0


def cmd_eval(a) -> int:
    run = Path(a.run)
    try:
        cfg = config_mod.from_dict(json.loads((run / "resolved-config.json").read_text()))
    except FileNotFoundError:
        raise FileNotFoundError(f"{run} has no resolved-config.json (not a run directory?)") from None
    ds = load_dataset(a.data)
    if ds.task != cfg.task.name:
        raise UsageError(f"dataset task {ds.task!r} does not match run task {cfg.task.name!r}")
    model = build_model(cfg)
    restore(model, run / "checkpoint")
    samples = ds.samples if a.split == "all" else ds.split(cfg.train.test_fraction)[1]
    filler = filler_tokens(cfg.task.filler) if cfg.task.filler else None
    metrics = evaluate(model, samples, filler=filler)
    out = Path(a.out or run)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["split", "n", *metrics])
        w.writeheader()
        w.writerow({"split": a.split, "n": len(samples), **metrics})
    if a.masks and cfg.task.name == "seg":
        mdir = out / "masks"
        mdir.mkdir(exist_ok=True)
        for i in range(0, len(samples), 32):
            chunk = samples[i:i + 32]
            probs = model.predict(model.collate(chunk, filler))
            for j, p in enumerate(probs):
                write_pgm(mdir / f"{i + j:05d}.pgm", (p >= 0.5).astype(np.uint8))
    print(f"{a.split} n={len(samples)} " + _fmt(metrics))
    return 0


def cmd_gradcheck(a) -> int:
    cfg = _load_config(a.config)
    model = build_model(cfg)
    perturb_trainable(model, cfg.seed)
    ds = gen_dataset(cfg.task.name, a.samples, cfg.data_seed)
    rep = gradcheck_model(model, ds.samples, step=a.step, tol=a.tol, max_entries=a.max_entries, seed=cfg.seed)
    for name, err in rep.per_param.items():
        print(f"{'PASS' if err <= rep.tol else 'FAIL'} {name} rel_err={err:.3e} entries={rep.checked[name]}")
    if rep.frozen_grad and max(rep.frozen_grad.values()) != 0.0:
        print("FAIL gradient reached a frozen tensor", file=sys.stderr)
        return 1
    print(rep.summary())
    return 0 if rep.passed else 1


def cmd_cost(a) -> int:
    cfg = _load_config(a.config)
    lengths = parse_range(a.sweep) if a.sweep else list(cfg.cost.lengths)
    if min(lengths) < 1:
        raise UsageError("sequence lengths must be >= 1")
    rows = sweep(cfg.model, lengths, cfg.mit, cfg.cost.prefix_tokens, measure=a.measure or cfg.cost.measure)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(rows, out / "cost.csv")
    cfg.echo(out)
    mit_dep = [conditioning_overhead_flops(cfg.model, L, "mit", cfg.mit).token_dependent for L in lengths]
    pre = [attn_map_elements(cfg.model, L, "prefix", L if cfg.cost.prefix_tokens is None else cfg.cost.prefix_tokens)
           for L in lengths]
    if len(lengths) > 1 and min(mit_dep) > 0:
        print(f"mit token-dependent overhead slope = {loglog_slope(lengths, mit_dep):.3f}")
    if len(lengths) > 1:
        print(f"prefix attention-map slope = {loglog_slope(lengths, pre):.3f}")
    same = all(attn_map_elements(cfg.model, L, "mit") == attn_map_elements(cfg.model, L, "base") for L in lengths)
    print(f"mit attention map equals base: {same}")
    est = paper_scale_estimate()
    print(f"7B-scale forward at L={est['L_tok']}: base {est['base_tflops']:.3f} TFLOPs, "
          f"mit {est['mit_tflops']:.3f} TFLOPs (published {est['published_tflops']}; {est['convention']})")
    print(f"wrote {out / 'cost.csv'}")
    return 0


def cmd_ablate(a) -> int:
    cfg = _load_config(a.config)
    axes = [x.strip() for x in a.axes.split(",") if x.strip()]
    bad = sorted(set(axes) - set(AXES))
    if bad or not axes:
        raise UsageError(f"unknown ablation axes {bad}; choose from {list(AXES)}")
    seeds = parse_range(a.seeds) if a.seeds else [cfg.seed]
    if a.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=a.epochs))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)
    rows = ablate(cfg, axes, seeds, train_models=not a.dry_run,
                  log=lambda r: print(json.dumps(r), flush=True))
    write_rows(rows, out / "ablation.csv")
    for r in rows:
        print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    return 0


def cmd_schema_sweep(a) -> int:
    cfg = _load_config(a.config)
    lengths = parse_range(a.lengths)
    seeds = parse_range(a.seeds) if a.seeds else [cfg.seed]
    if a.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=a.epochs))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)
    rows = schema_sweep(cfg, lengths, seeds, log=lambda r: print(json.dumps(r), flush=True))
    write_rows(rows, out / "schema_sweep.csv")
    return 0


def cmd_modalities(a) -> int:
    cfg = _load_config(a.config)
    if cfg.task.name != "msa":
        raise UsageError("modalities needs a config with task.name = 'msa'")
    if a.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=a.epochs))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)
    rows = modality_study(cfg, log=lambda r: print(json.dumps(r), flush=True))
    write_rows(rows, out / "modalities.csv")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mitune", description="Infusion tuning of a frozen micro transformer.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--task", required=True, choices=["seg", "cls", "msa"])
    g.add_argument("--n", required=True, type=int)
    g.add_argument("--seed", required=True, type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--threads", type=int, default=None, help="worker threads (default: MIT_THREADS or 1)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train infusion + head on a dataset")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a run directory")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["test", "all"], default="test")
    e.add_argument("--out", help="output directory (default: the run directory)")
    e.add_argument("--masks", action="store_true", help="write predicted masks as PGM (seg)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every trainable tensor")
    c.add_argument("--config")
    c.add_argument("--samples", type=int, default=2)
    c.add_argument("--step", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--max-entries", type=int, default=8)
    c.set_defaults(func=cmd_gradcheck)

    k = sub.add_parser("cost", help="closed-form cost sweep (CSV)")
    k.add_argument("--config")
    k.add_argument("--sweep", help="lengths, e.g. L=32..512")
    k.add_argument("--measure", action="store_true", help="also run the instrumented forward")
    k.add_argument("--out", default="cost-out")
    k.set_defaults(func=cmd_cost)

    b = sub.add_parser("ablate", help="train all on/off combinations of the infusion axes")
    b.add_argument("--config")
    b.add_argument("--axes", default="kv,ff,rescale")
    b.add_argument("--seeds", help="e.g. 7,8,9 (default: config seed)")
    b.add_argument("--epochs", type=int)
    b.add_argument("--dry-run", action="store_true", help="parameter accounting only, no training")
    b.add_argument("--out", default="ablate-out")
    b.set_defaults(func=cmd_ablate)

    s = sub.add_parser("schema-sweep", help="last-token vs task-token over filler lengths")
    s.add_argument("--config")
    s.add_argument("--lengths", required=True, help="filler token counts, e.g. 8..96")
    s.add_argument("--seeds")
    s.add_argument("--epochs", type=int)
    s.add_argument("--out", default="schema-out")
    s.set_defaults(func=cmd_schema_sweep)

    m = sub.add_parser("modalities", help="sentiment modality ablation (text / +acoustic / +facial)")
    m.add_argument("--config")
    m.add_argument("--epochs", type=int)
    m.add_argument("--out", default="modalities-out")
    m.set_defaults(func=cmd_modalities)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, DataError, CheckpointError, RuntimeError, ValueError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
