"""Raw spectra vs diffusion features as classifier input, averaged over seeds.

    python3 scripts/ablation.py --preset hard --seeds 0 1 2 --out runs/ablation
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from hyperdiff import hsio, synth
from hyperdiff.pipeline import desk_config, run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="hard", choices=sorted(synth.PRESETS))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    rows = []
    for seed in args.seeds:
        root = Path(args.out) / f"seed{seed}"
        cube, labels, _ = synth.generate(synth.preset(args.preset, seed=seed))
        hsio.save_dataset(root / "data", cube, labels)
        norm = hsio.normalize_bands(cube).data
        train, test = hsio.stratified_split(labels, hsio.SplitSpec(train_ratio=0.1, seed=seed))
        row = {"seed": seed, "nearest_mean": synth.nearest_mean_oa(norm, labels.labels, train, test)}
        for source in ["raw", "diffusion"]:
            row[source] = run_pipeline(desk_config(root / "data", root / "run", seed, feature_source=source)).oa
        print(json.dumps(row))
        rows.append(row)
    for key in ["nearest_mean", "raw", "diffusion"]:
        print(f"{key:>12}: mean OA {np.mean([r[key] for r in rows]):.4f}")
    (Path(args.out) / "ablation.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
