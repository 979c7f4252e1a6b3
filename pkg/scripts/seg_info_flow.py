"""Segmentation: full infusion vs. no infusion vs. text-only oracle, over seeds.

usage: python3 scripts/seg_info_flow.py [--seeds 7,8,9] [--n 1000] [--out seg-flow-out]
"""
import argparse
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from mitune import config as config_mod
from mitune.data import gen_dataset, text_only_seg_oracle
from mitune.experiments import build_model, run_training


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seeds", default="7,8,9")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--out", default="seg-flow-out")
    a = p.parse_args()
    seeds = [int(s) for s in a.seeds.split(",")]
    rows = []
    for seed in seeds:
        cfg = config_mod.from_dict({"seed": seed, "task": {"name": "seg"}, "data": {"n": a.n}})
        ds = gen_dataset("seg", a.n, seed)
        _, test = ds.split(cfg.train.test_fraction)
        row = {"seed": seed, "text_only_oracle": text_only_seg_oracle(test)}
        for name, mit in (("full", cfg.mit), ("no_infusion", replace(cfg.mit, infused_layers=()))):
            _, res = run_training(cfg, ds, model=build_model(cfg, mit=mit))
            row[name] = res.metrics["dice"]
        print(json.dumps(row), flush=True)
        rows.append(row)
    summary = {k: float(np.mean([r[k] for r in rows])) for k in ("full", "no_infusion", "text_only_oracle")}
    print("mean", json.dumps(summary))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "seg_info_flow.json").write_text(json.dumps({"rows": rows, "mean": summary}, indent=2))


if __name__ == "__main__":
    main()
