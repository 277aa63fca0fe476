"""``hyperdiff`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import hsio, synth
from .pipeline import (
    ConfigError,
    RunConfig,
    StageError,
    load_inputs,
    run_pipeline,
    run_reconstruct,
    run_sweep,
    stage_classifier,
    stage_diffusion,
    stage_evaluate,
    stage_features,
    write_manifest,
)

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
log = logging.getLogger("hyperdiff")


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--force", action="store_true", help="recompute existing artifacts")
    common.add_argument("--dataset", help="cube container directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hyperdiff", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="convert CSV into a cube container")
    s.add_argument("src", help="CSV with row,col,band,value rows, or an existing container")
    s.add_argument("dst")
    s.add_argument("--labels", help="CSV with row,col,label rows")

    s = sub.add_parser("synth", parents=[common], help="write a synthetic cube container")
    s.add_argument("dst")
    s.add_argument("--preset", default="default", choices=sorted(synth.PRESETS))
    for name, kind in [("height", int), ("width", int), ("bands", int), ("classes", int),
                       ("separation", float), ("noise", float)]:
        s.add_argument(f"--{name}", type=kind)

    for name, text in [("train-diffusion", "train the denoiser"),
                       ("extract-features", "compute the diffusion feature cube"),
                       ("train-classifier", "train the transformer classifier"),
                       ("evaluate", "score the classifier and render maps"),
                       ("pipeline", "run every stage")]:
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--feature-source", choices=["raw", "diffusion"])
        if name == "extract-features":
            s.add_argument("--timestamp", type=int)
            s.add_argument("--layer-index", type=int, choices=[0, 1, 2])

    s = sub.add_parser("sweep", parents=[common], help="timestamp x layer-index grid")
    s.add_argument("--timestamps", type=_ints, default=[5, 10, 100, 200])
    s.add_argument("--layers", type=_ints, default=[0, 1, 2])

    s = sub.add_parser("reconstruct", parents=[common], help="reverse-process reconstruction panels")
    s.add_argument("--timestamps", type=_ints, default=[400, 200, 100, 80, 50, 10, 5])
    s.add_argument("--bands", type=_ints, help="false-colour band triplet (R,G,B)")
    return p


def resolve_config(args) -> RunConfig:
    """flag > file > default."""
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=str(args.out))
    if args.dataset:
        cfg = replace(cfg, dataset=args.dataset)
    if getattr(args, "feature_source", None):
        cfg = replace(cfg, feature_source=args.feature_source)
    feats = dict(cfg.features)
    if getattr(args, "timestamp", None) is not None:
        feats["timestamp"] = args.timestamp
    if getattr(args, "layer_index", None) is not None:
        feats["layer_index"] = args.layer_index
    cfg = replace(cfg, features=feats)
    cfg.validate()
    return cfg


def cube_stats(ds: hsio.Dataset) -> str:
    lab = ds.labels
    return (f"H={ds.cube.height} W={ds.cube.width} B={ds.cube.bands} "
            f"classes={len(lab.classes())} labeled={lab.labeled_indices().size}")


def cmd_ingest(args) -> int:
    dst = Path(args.dst)
    if (dst / "header.json").exists() and not args.force:
        print(f"{dst} exists; use --force to overwrite")
        ds = hsio.load_dataset(dst)
    else:
        src = Path(args.src)
        if src.is_dir():
            ds = hsio.load_dataset(src)
        else:
            cube, labels = hsio.read_csv_cube(src, args.labels)
            ds = hsio.Dataset(cube, labels or hsio.LabelMap(np.zeros(cube.data.shape[:2], np.int64)))
        hsio.save_dataset(dst, ds.cube, ds.labels, ds.classes)
    print(cube_stats(ds))
    return EXIT_OK


def cmd_synth(args) -> int:
    dst = Path(args.dst)
    if (dst / "header.json").exists() and not args.force:
        print(f"{dst} exists; use --force to overwrite")
        return EXIT_OK
    over = {k: v for k, v in dict(height=args.height, width=args.width, bands=args.bands,
                                    n_classes=args.classes, separation=args.separation,
                                    noise=args.noise).items() if v is not None}
    if args.seed is not None:
        over["seed"] = args.seed
    try:
        params = synth.preset(args.preset, **over)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cube, labels, _ = synth.generate(params)
    classes = {c: {"name": f"class_{c}"} for c in labels.classes()}
    hsio.save_dataset(dst, cube, labels, classes)
    (dst / "synth.json").write_text(json.dumps(asdict(params), indent=2))
    print(cube_stats(hsio.load_dataset(dst)))
    return EXIT_OK


def _prepare(args):
    cfg = resolve_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = load_inputs(cfg, out)
    write_manifest(cfg, out, inputs.cube.shape[2], inputs.dataset.labels.n_classes)
    return cfg, out, inputs


def _tag(cfg) -> str:
    return "" if cfg.feature_source == "diffusion" else "_raw"


def cmd_stage(args) -> int:
    cfg, out, inputs = _prepare(args)
    if args.command == "train-diffusion":
        stage_diffusion(cfg, inputs, out, args.force)
        print(f"diffusion checkpoint: {out / 'diffusion' / 'model.ckpt'}")
        return EXIT_OK
    fc = stage_features(cfg, inputs, out, args.force and args.command == "extract-features")
    if args.command == "extract-features":
        print(f"features: {fc.height}x{fc.width}x{fc.dim} {fc.provenance}")
        return EXIT_OK
    model = stage_classifier(cfg, inputs, fc, out, args.force and args.command == "train-classifier",
                             "classifier" + _tag(cfg))
    if args.command == "train-classifier":
        return EXIT_OK
    rep = stage_evaluate(cfg, inputs, fc, model, out, args.force, "eval" + _tag(cfg))
    print(f"OA={rep.oa:.4f} AA={rep.aa:.4f} kappa={rep.kappa:.4f}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = resolve_config(args)
    rep = run_pipeline(cfg, args.force)
    print((Path(cfg.out) / f"eval{_tag(cfg)}" / "table.txt").read_text(), end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    run_sweep(cfg, args.timestamps, args.layers, args.force)
    print((Path(cfg.out) / "sweep.txt").read_text(), end="")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = resolve_config(args)
    rows = run_reconstruct(cfg, args.timestamps, args.force, args.bands)
    for r in rows:
        print(f"start_t={r['start_t']:>4} mse={r['mse']:.6f}")
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "train-diffusion": cmd_stage,
    "extract-features": cmd_stage,
    "train-classifier": cmd_stage,
    "evaluate": cmd_stage,
    "pipeline": cmd_pipeline,
    "sweep": cmd_sweep,
    "reconstruct": cmd_reconstruct,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except hsio.CubeFormatError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
