"""Long-range retrieval comparison across layer types, cluster counts and seeds.

Trains every (variant, seed) pair from one base config and writes a JSON
summary with per-run test accuracy and per-variant means.

    python3 scripts/run_longrange.py --config configs/longrange.yaml --seeds 0,1,2 --out runs/longrange.json
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import torch

from clusterformer.cli import build_datasets, parse_config
from clusterformer.model import CF, LSH, SW, build_model
from clusterformer.train import evaluate, train

VARIANTS = {
    "cluster-former": {"layer_schedule": [SW, SW, CF, SW], "clusters": 16},
    "sliding-window": {"layer_schedule": [SW, SW, SW, SW]},
    "lsh": {"layer_schedule": [SW, SW, LSH, SW], "hashes": 16},
    "cluster-former-p4": {"layer_schedule": [SW, SW, CF, SW], "clusters": 4},
    "cluster-former-p64": {"layer_schedule": [SW, SW, CF, SW], "clusters": 64},
}


def run_all(config: str, seeds: list[int], variants: list[str], max_steps: int | None = None, log=print) -> dict:
    cfg = parse_config(config)
    if max_steps is not None:
        cfg.run = dataclasses.replace(cfg.run, max_steps=max_steps, warmup=min(cfg.run.warmup, max_steps))
    train_ds, test_ds = build_datasets(cfg, Path(config).resolve().parent)
    runs = []
    for name in variants:
        for seed in seeds:
            mcfg = dataclasses.replace(cfg.model, seed=seed, **VARIANTS[name])
            model = build_model(mcfg)
            t0 = time.time()
            history = train(model, train_ds, dataclasses.replace(cfg.run, seed=seed))
            acc = evaluate(model, test_ds, "accuracy")
            rec = {
                "variant": name,
                "seed": seed,
                "accuracy": acc,
                "final_train_loss": history[-1]["loss"],
                "seconds": round(time.time() - t0, 1),
            }
            log(json.dumps(rec))
            runs.append(rec)
    means = {}
    for name in variants:
        accs = [r["accuracy"] for r in runs if r["variant"] == name]
        means[name] = sum(accs) / len(accs)
    return {"config": str(config), "seeds": seeds, "chance": cfg.data.chance, "runs": runs, "mean_accuracy": means}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/longrange.yaml")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--variants", default=",".join(VARIANTS))
    ap.add_argument("--max-steps", type=int)
    ap.add_argument("--out", default="runs/longrange.json")
    args = ap.parse_args(argv)
    torch.set_num_threads(1)
    logging.basicConfig(level=logging.WARNING)
    res = run_all(args.config, [int(s) for s in args.seeds.split(",")], args.variants.split(","), args.max_steps, log=lambda s: print(s, flush=True))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(res, indent=2))
    print(json.dumps(res["mean_accuracy"]))
    return 0


if __name__ == "__main__":
    sys.exit(main())
