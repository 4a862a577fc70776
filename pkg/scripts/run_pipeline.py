#!/usr/bin/env python3
"""End-to-end demo at toy scale: generate data, pretrain, fine-tune, embed,
retrieve, probe, and verify, all through the CLI entry points.

Finishes in a couple of minutes; pass --steps to train longer.
"""

from __future__ import annotations

import argparse
import json
import tempfile
from pathlib import Path

from tristream import cli, structdata, synthetic

TOY_CONFIG = {
    "model": {
        "comp": {"d_comp": 16, "n_layers": 1, "n_heads": 2, "dropout": 0.0},
        "struct": {"d_struct": 16, "r_cut": 5.0, "n_radial": 4, "n_channels": 3,
                   "l_max": 3, "n_mlp_layers": 2, "n_mp_layers": 1, "scales": [0.5, 1.0]},
        "inter": {"d_int": 16, "n_layers": 2, "r_cut": 5.0, "n_radial": 4,
                  "scales": [0.5, 1.0]},
        "head": {"hidden": 16, "n_hidden": 2},
        "graph_cutoff": 5.0,
        "max_neighbors": 16,
    },
    "augment": {"noise_sigma": [0.02, 0.1], "graph_radius": [4.0, 5.0],
                "graph_max_neighbors": [8, 16]},
    "ssl_weights": {"isotropy_slices": 64},
    "pretrain": {"steps": 200, "batch_size": 8, "warmup_steps": 20, "lr": 5e-4},
    "finetune": {"steps": 200, "batch_size": 8, "warmup_steps": 20, "lr": 1e-3,
                 "weight_decay": 1e-3, "clip_norm": 1.0},
}


def run(cmd: list[str]) -> None:
    print(f"\n$ tristream {' '.join(cmd)}")
    code = cli.run(cmd)
    if code != 0:
        raise SystemExit(f"command failed with exit code {code}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default=None)
    parser.add_argument("--steps", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    workdir = Path(args.workdir) if args.workdir else Path(tempfile.mkdtemp(prefix="tristream_"))
    workdir.mkdir(parents=True, exist_ok=True)
    print(f"working in {workdir}")

    config = dict(TOY_CONFIG)
    config["pretrain"] = dict(config["pretrain"], steps=args.steps)
    config["finetune"] = dict(config["finetune"], steps=args.steps)
    config_path = workdir / "config.json"
    config_path.write_text(json.dumps(config, indent=2))

    cross = synthetic.cross_corpus(n_comp_families=10, seed=args.seed)
    structdata.write_dataset(cross, workdir / "cross.xyz")
    pair_train = synthetic.lj_dataset(200, seed=args.seed)
    pair_val = synthetic.lj_dataset(40, seed=args.seed + 1)
    structdata.write_dataset(pair_train, workdir / "pair_train.xyz")
    structdata.write_dataset(pair_val, workdir / "pair_val.xyz")
    structdata.write_manifest(workdir / "manifest.json", {
        "pair_train.xyz": "train", "pair_val.xyz": "val"})

    base = ["--config", str(config_path), "--seed", str(args.seed)]
    ckpt = workdir / "pretrained.npz"
    run(["pretrain", "--data", str(workdir / "cross.xyz"), "--out", str(ckpt),
         "--log", str(workdir / "pretrain_loss.csv"), *base])
    run(["report", "--log", str(workdir / "pretrain_loss.csv")])

    ft = workdir / "finetuned.npz"
    run(["finetune", "--data", str(workdir / "manifest.json"), "--train-split", "train",
         "--val-split", "val", "--mode", "conservative", "--init", str(ckpt),
         "--out", str(ft), *base])
    run(["report", "--checkpoint", str(ft)])

    index = workdir / "index.npz"
    run(["embed", "--checkpoint", str(ckpt), "--data", str(workdir / "cross.xyz"),
         "--out", str(index), *base])
    run(["retrieve", "--index", str(index), "--query", "3", "--stream", "comp",
         "--k", "5", *base])
    run(["retrieve", "--index", str(index), "--query", "3", "--stream", "struct",
         "--k", "5", *base])
    run(["probe", "--index", str(index), "--stream", "struct",
         "--target", "crystal_system", "--head", "linear", "--steps", "800", *base])
    run(["verify", "--suite", "theory", "--rank-trials", "5",
         "--out", str(workdir / "theory_report.json"), *base])
    print(f"\nartifacts in {workdir}")


if __name__ == "__main__":
    main()
