"""Sentiment modality ablation (text, +acoustic, +facial, all) over seeds.

usage: python3 scripts/msa_modalities.py [--seeds 7,8,9] [--out msa-out]
"""
import argparse
import json
from pathlib import Path

import numpy as np

from mitune import config as config_mod
from mitune.data import gen_dataset, msa_lsq_oracle
from mitune.experiments import modality_study


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seeds", default="7,8,9")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--out", default="msa-out")
    a = p.parse_args()
    per_seed = []
    for seed in (int(s) for s in a.seeds.split(",")):
        cfg = config_mod.from_dict({"seed": seed, "task": {"name": "msa"}, "data": {"n": a.n}})
        ds = gen_dataset("msa", a.n, seed)
        rows = modality_study(cfg, ds, log=lambda r: print(seed, json.dumps(r), flush=True))
        per_seed.append({r["modalities"]: r["mae"] for r in rows})
        print(seed, "least-squares oracle", json.dumps(msa_lsq_oracle(ds.samples)), flush=True)
    mean = {k: float(np.mean([s[k] for s in per_seed])) for k in per_seed[0]}
    print("mean MAE", json.dumps(mean))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "modalities.json").write_text(json.dumps({"per_seed": per_seed, "mean": mean}, indent=2))


if __name__ == "__main__":
    main()
