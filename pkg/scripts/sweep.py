"""Timestamp x layer sweep over diffusion features on one synthetic scene.

Trains the diffusion model once, then fits a classifier per (timestamp, layer).

    python3 scripts/sweep.py --preset hard --seed 0 --timestamps 5 10 100 200 --layers 0 1 2
"""

import argparse
import logging
from pathlib import Path

from hyperdiff import hsio, synth
from hyperdiff.pipeline import desk_config, format_sweep, run_pipeline, run_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="hard", choices=sorted(synth.PRESETS))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--timestamps", type=int, nargs="+", default=[5, 10, 100, 200])
    ap.add_argument("--layers", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    root = Path(args.out)
    cube, labels, _ = synth.generate(synth.preset(args.preset, seed=args.seed))
    hsio.save_dataset(root / "data", cube, labels)
    cfg = desk_config(root / "data", root / "run", args.seed)
    run_pipeline(cfg)  # trains and checkpoints the diffusion model
    print(format_sweep(run_sweep(cfg, args.timestamps, args.layers)))


if __name__ == "__main__":
    main()
