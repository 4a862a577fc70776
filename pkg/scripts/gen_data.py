#!/usr/bin/env python3
"""Generate the synthetic corpora used by the experiments.

Writes extended-XYZ files plus a JSON manifest:
  - pair-potential clusters with exact energy/force labels (train/val)
  - the composition-by-geometry crossed corpus for retrieval studies
"""

from __future__ import annotations

import argparse
from pathlib import Path

from tristream import structdata, synthetic


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data", help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--n-train", type=int, default=2000)
    parser.add_argument("--n-val", type=int, default=200)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    train = synthetic.lj_dataset(args.n_train, seed=args.seed)
    val = synthetic.lj_dataset(args.n_val, seed=args.seed + 1)
    structdata.write_dataset(train, out / "pair_train.xyz")
    structdata.write_dataset(val, out / "pair_val.xyz")

    cross = synthetic.cross_corpus(n_comp_families=20, seed=args.seed)
    structdata.write_dataset(cross, out / "cross_corpus.xyz")

    structdata.write_manifest(out / "manifest.json", {
        "pair_train.xyz": "train",
        "pair_val.xyz": "val",
        "cross_corpus.xyz": "retrieval",
    })
    print(f"wrote {len(train)} train / {len(val)} val pair-potential structures "
          f"and {len(cross)} crossed-corpus structures to {out}/")


if __name__ == "__main__":
    main()
