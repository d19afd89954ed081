#!/usr/bin/env python3
"""Run the full pipeline on a synthetic cohort: generate, cross-validate,
explain, and report, all under one output root.

The quick preset finishes in a few minutes on one core; the default
preset is the full desk-scale protocol and takes tens of minutes.
"""

import argparse
import json
import sys
from pathlib import Path

from pathgt import cli

FULL = {
    "synth": {},
    "interpret": {"baselines": 32, "steps": 50, "alpha": 0.05},
}

QUICK = {
    "synth": {
        "n_patients": 160,
        "n_genes": 120,
        "n_pathways": 8,
        "genes_per_pathway": 16,
        "overlap_genes": 2,
        "effect_size": 3.0,
        "positive_fraction": 0.3,
        "driver_pathways": 2,
        "seed": 7,
    },
    "model": {"embed_dim": 16, "film_hidden": 16, "n_layers": 1,
              "n_heads": 2, "lpe_dims": 4, "dropout": 0.1},
    "train": {"max_epochs": 40, "min_epochs": 10, "patience": 10},
    "n_folds": 3,
    "interpret": {"baselines": 8, "steps": 16, "alpha": 0.05},
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="output root directory")
    parser.add_argument("--quick", action="store_true", help="small fast preset")
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--seed-list", default="42,123")
    parser.add_argument("--force", action="store_true")
    args = parser.parse_args()

    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    config = QUICK if args.quick else FULL
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")

    common = ["--config", str(cfg_path), "--seed-list", args.seed_list,
              "--jobs", str(args.jobs)]
    force = ["--force"] if args.force else []

    for argv in (
        ["synth", *common, "--out", str(root / "cohort"), *force],
        ["cv", *common, "--out", str(root / "cv"), *force],
        ["explain", *common, "--run", str(root / "cv"), *force],
        ["report", str(root / "cv"), "--out", str(root / "report.json"), *force],
    ):
        print(f"$ pathgt {' '.join(argv)}")
        rc = cli.main(argv)
        if rc != 0:
            return rc
    print(f"pipeline artifacts under {root}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
