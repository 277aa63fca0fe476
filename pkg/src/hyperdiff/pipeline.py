"""Run configuration and the resumable stages behind the command-line tool.

Every stage writes its artifacts under the run's output directory and
finishes by writing a ``done.json`` marker; a stage whose marker exists is
skipped unless ``force`` is set. Later stages read only earlier artifacts.
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import evalx, hsio
from .diffusion import DiffusionConfig, load_schedule, make_schedule, reconstruct, train_diffusion
from .featx import FeatureCube, PcaModel, extract_features
from .ssdn import SsdnConfig, build_ssdn, load_ssdn
from .svit import SvitConfig, load_svit, predict_map, save_svit, train_classifier
from . import ndk

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str, checkpoint: str | None = None):
        self.stage, self.checkpoint = stage, checkpoint
        super().__init__(f"stage {stage!r} failed: {message}" + (f" (last checkpoint: {checkpoint})" if checkpoint else ""))


@dataclass
class FeatureSettings:
    timestamp: int = 5
    layer_index: int = 1
    pca_dim: int = 64


@dataclass
class RunConfig:
    dataset: str = ""
    out: str = "runs/default"
    seed: int = 0
    feature_source: str = "diffusion"
    diffusion: dict = field(default_factory=dict)
    ssdn: dict = field(default_factory=dict)
    features: dict = field(default_factory=dict)
    svit: dict = field(default_factory=dict)
    split: dict = field(default_factory=lambda: {"train_ratio": 0.1})

    # -- typed views; each validates its section
    def diffusion_config(self) -> DiffusionConfig:
        return _build(DiffusionConfig, self.diffusion | {"seed": self.seed}, "diffusion")

    def ssdn_config(self, bands: int) -> SsdnConfig:
        return _build(SsdnConfig, self.ssdn | {"bands": bands, "seed": self.seed}, "ssdn")

    def feature_settings(self) -> FeatureSettings:
        return _build(FeatureSettings, self.features, "features")

    def svit_config(self, n_classes: int) -> SvitConfig:
        return _build(SvitConfig, self.svit | {"n_classes": n_classes, "seed": self.seed,
                                                "feature_source": self.feature_source}, "svit")

    def split_spec(self) -> hsio.SplitSpec:
        d = dict(self.split)
        if "per_class_train_counts" in d:
            d["per_class_train_counts"] = {int(k): int(v) for k, v in d["per_class_train_counts"].items()}
        return _build(hsio.SplitSpec, d | {"seed": self.seed}, "split")

    def validate(self) -> None:
        if self.feature_source not in ("raw", "diffusion"):
            raise ConfigError(f"feature_source must be 'raw' or 'diffusion', got {self.feature_source!r}")
        self.diffusion_config()
        self.feature_settings()
        self.split_spec()
        self.ssdn_config(bands=8)
        self.svit_config(n_classes=2)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None


# Settings calibrated for 32x32x16 synthetic scenes on a single CPU.
DESK = dict(
    diffusion=dict(batch_size=32, max_steps=600, learning_rate=1e-3),
    ssdn=dict(patch_size=8, base_channels=8),
    features=dict(timestamp=5, layer_index=2, pca_dim=32),
    svit=dict(context=8, model_dim=32, mlp_dim=64, epochs=20, batch_size=16),
    split=dict(train_ratio=0.1),
)


def desk_config(dataset, out, seed: int = 0, **overrides) -> RunConfig:
    """RunConfig with the desk-scale settings; section overrides are merged key by key."""
    d = {k: dict(v) for k, v in DESK.items()}
    for key, val in overrides.items():
        if isinstance(val, dict) and key in d:
            d[key] |= val
        else:
            d[key] = val
    return RunConfig(dataset=str(dataset), out=str(out), seed=seed, **d)

def _build(kind, values: dict, section: str):
    names = {f.name for f in fields(kind)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"[{section}] unknown keys {sorted(unknown)}")
    try:
        return kind(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _done(d: Path) -> bool:
    return (d / "done.json").exists()


def _mark_done(d: Path, info: dict | None = None) -> None:
    (d / "done.json").write_text(json.dumps(info or {}, indent=2, sort_keys=True))


def _fresh(d: Path, force: bool) -> bool:
    """True if the stage in ``d`` must run; clears it first when forced."""
    if force and d.exists():
        shutil.rmtree(d)
    return not _done(d)


# --------------------------------------------------------------------------
# stages


@dataclass
class Loaded:
    dataset: hsio.Dataset
    cube: np.ndarray  # normalized H x W x B
    train_idx: np.ndarray
    test_idx: np.ndarray


def load_inputs(cfg: RunConfig, out: Path) -> Loaded:
    try:
        ds = hsio.load_dataset(cfg.dataset)
    except (OSError, hsio.CubeFormatError) as exc:
        raise StageError("load", str(exc)) from None
    cube = hsio.normalize_bands(ds.cube).data
    split_file = out / "split.json"
    if split_file.exists():
        s = json.loads(split_file.read_text())
        train, test = np.asarray(s["train"], np.int64), np.asarray(s["test"], np.int64)
    else:
        try:
            train, test = hsio.stratified_split(ds.labels, cfg.split_spec())
        except ValueError as exc:
            raise StageError("split", str(exc)) from None
        split_file.write_text(json.dumps({"train": train.tolist(), "test": test.tolist()}))
    return Loaded(ds, cube, train, test)


def stage_diffusion(cfg: RunConfig, inputs: Loaded, out: Path, force: bool = False):
    d = out / "diffusion"
    if _fresh(d, force):
        dcfg = cfg.diffusion_config()
        net = build_ssdn(cfg.ssdn_config(inputs.cube.shape[2]))
        try:
            losses = train_diffusion(inputs.cube, net, dcfg, out_dir=d)
        except Exception as exc:
            ckpt = d / "model.ckpt"
            raise StageError("train-diffusion", str(exc), str(ckpt) if ckpt.exists() else None) from exc
        _mark_done(d, {"steps": len(losses), "final_loss": losses[-1] if losses else None})
    return load_ssdn(d), load_schedule(d / "schedule.json")


def stage_features(cfg: RunConfig, inputs: Loaded, out: Path, force: bool = False,
                   settings: FeatureSettings | None = None, subdir: str | None = None) -> FeatureCube:
    if cfg.feature_source == "raw":
        d = out / (subdir or "features_raw")
        if _fresh(d, force):
            d.mkdir(parents=True, exist_ok=True)
            FeatureCube(inputs.cube.copy(), {"source": "raw"}).save(d)
            _mark_done(d)
        return FeatureCube.load(d)
    settings = settings or cfg.feature_settings()
    d = out / (subdir or "features")
    if _fresh(d, force):
        net, sched = stage_diffusion(cfg, inputs, out)
        try:
            fc, pca = extract_features(
                inputs.cube, net, sched, settings.timestamp, settings.layer_index,
                fit_indices=inputs.train_idx, pca_dim=settings.pca_dim, noise_seed=cfg.seed,
            )
        except Exception as exc:
            raise StageError("extract-features", str(exc)) from exc
        fc.provenance["source"] = "diffusion"
        fc.save(d)
        pca.save(d / "pca.ckpt")
        _mark_done(d, fc.provenance)
    return FeatureCube.load(d)


def stage_classifier(cfg: RunConfig, inputs: Loaded, features: FeatureCube, out: Path,
                     force: bool = False, subdir: str = "classifier"):
    d = out / subdir
    if _fresh(d, force):
        scfg = cfg.svit_config(inputs.dataset.labels.n_classes)
        try:
            model, history = train_classifier(
                features.data, inputs.dataset.labels, inputs.train_idx, inputs.test_idx, scfg
            )
        except Exception as exc:
            raise StageError("train-classifier", str(exc)) from exc
        save_svit(model, d, history)
        _mark_done(d)
    return load_svit(d)


def stage_evaluate(cfg: RunConfig, inputs: Loaded, features: FeatureCube, model, out: Path,
                   force: bool = False, subdir: str = "eval", maps: bool = True) -> evalx.EvalReport:
    d = out / subdir
    if _fresh(d, force):
        d.mkdir(parents=True, exist_ok=True)
        labels = inputs.dataset.labels
        try:
            pred = predict_map(model, features.data)
            report = evalx.evaluate(pred, labels, inputs.test_idx, labels.n_classes)
        except Exception as exc:
            raise StageError("evaluate", str(exc)) from exc
        report.save(d / "report.json")
        evalx.write_report_csv(report, d / "report.csv")
        names = {c: m.get("name", "") for c, m in inputs.dataset.classes.items()}
        (d / "table.txt").write_text(evalx.format_table(report, names) + "\n")
        if maps:
            pal = evalx.default_palette(labels.n_classes, inputs.dataset.classes)
            evalx.render_map(pred, pal, d / "pred_map.png")
            evalx.render_map(labels, pal, d / "truth_map.png")
        _mark_done(d)
    return evalx.EvalReport.load(d / "report.json")


def write_manifest(cfg: RunConfig, out: Path, bands: int | None = None, n_classes: int | None = None) -> None:
    eff = asdict(cfg)
    eff["effective"] = {
        "diffusion": asdict(cfg.diffusion_config()),
        "features": asdict(cfg.feature_settings()),
    }
    if bands is not None:
        eff["effective"]["ssdn"] = asdict(cfg.ssdn_config(bands))
    if n_classes is not None:
        eff["effective"]["svit"] = asdict(cfg.svit_config(n_classes))
    (out / "run.json").write_text(json.dumps(eff, indent=2, sort_keys=True))


def run_pipeline(cfg: RunConfig, force: bool = False) -> evalx.EvalReport:
    """train diffusion -> extract features -> train classifier -> evaluate."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if force:
        (out / "split.json").unlink(missing_ok=True)
    inputs = load_inputs(cfg, out)
    write_manifest(cfg, out, inputs.cube.shape[2], inputs.dataset.labels.n_classes)
    tag = "" if cfg.feature_source == "diffusion" else "_raw"
    features = stage_features(cfg, inputs, out, force)
    model = stage_classifier(cfg, inputs, features, out, force, subdir="classifier" + tag)
    return stage_evaluate(cfg, inputs, features, model, out, force, subdir="eval" + tag)


def run_sweep(cfg: RunConfig, timestamps, layer_indices, force: bool = False) -> list[dict]:
    """Fresh features + classifier + evaluation for every (timestamp, layer) pair."""
    cfg.validate()
    out = Path(cfg.out)
    if not _done(out / "diffusion"):
        raise StageError("sweep", f"no trained diffusion checkpoint under {out / 'diffusion'}")
    inputs = load_inputs(cfg, out)
    base = cfg.feature_settings()
    rows = []
    for layer in layer_indices:
        for t in timestamps:
            sub = f"sweep/t{t}_l{layer}"
            s = replace(base, timestamp=int(t), layer_index=int(layer))
            fc = stage_features(replace(cfg, feature_source="diffusion"), inputs, out, force, s, sub + "/features")
            model = stage_classifier(cfg, inputs, fc, out, force, sub + "/classifier")
            rep = stage_evaluate(cfg, inputs, fc, model, out, force, sub + "/eval", maps=False)
            rows.append({"layer_index": layer, "timestamp": t, "oa": rep.oa, "aa": rep.aa, "kappa": rep.kappa})
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["layer_index", "timestamp", "oa", "aa", "kappa"])
        w.writeheader()
        w.writerows(rows)
    (out / "sweep.txt").write_text(format_sweep(rows) + "\n")
    return rows


def format_sweep(rows: list[dict]) -> str:
    lines = [f"{'LayerIndex':>10} {'Timestamp':>9} {'OA(%)':>7} {'AA(%)':>7} {'kappa*100':>9}"]
    last = None
    for r in rows:
        if last is not None and r["layer_index"] != last:
            lines.append("-" * 46)
        layer = str(r["layer_index"]) if r["layer_index"] != last else ""
        last = r["layer_index"]
        lines.append(f"{layer:>10} {r['timestamp']:>9} {100 * r['oa']:7.2f} {100 * r['aa']:7.2f} {100 * r['kappa']:9.2f}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# reconstruction panels


def false_color(cube: np.ndarray, bands=None) -> np.ndarray:
    b = cube.shape[2]
    if bands is None:
        bands = [min(b - 1, int(round(f * (b - 1)))) for f in (0.9, 0.5, 0.1)]
    rgb = np.clip(cube[:, :, list(bands)], 0.0, 1.0)
    return (rgb * 255 + 0.5).astype(np.uint8)


@torch.no_grad()
def reconstruct_cube(cube: np.ndarray, net, sched, start_t: int, seed: int) -> np.ndarray:
    """Noise every K x K tile to ``start_t`` and run the reverse chain back to 0."""
    k = net.config.patch_size
    h, w, b = cube.shape
    ph, pw = -(-h // k) * k, -(-w // k) * k
    padded = np.pad(cube, ((0, ph - h), (0, pw - w), (0, 0)), mode="symmetric")
    tiles = padded.reshape(ph // k, k, pw // k, k, b).transpose(0, 2, 1, 3, 4).reshape(-1, k, k, b)
    net.eval()
    rec = reconstruct(torch.from_numpy(np.ascontiguousarray(tiles)), start_t, net, sched, ndk.generator(seed)).numpy()
    grid = rec.reshape(ph // k, pw // k, k, k, b).transpose(0, 2, 1, 3, 4).reshape(ph, pw, b)
    return grid[:h, :w]


def run_reconstruct(cfg: RunConfig, start_timestamps, force: bool = False, bands=None) -> list[dict]:
    from PIL import Image

    out = Path(cfg.out)
    if not _done(out / "diffusion"):
        raise StageError("reconstruct", f"no trained diffusion checkpoint under {out / 'diffusion'}")
    net = load_ssdn(out / "diffusion")
    sched = load_schedule(out / "diffusion" / "schedule.json")
    inputs = load_inputs(cfg, out)
    d = out / "reconstruct"
    if force and d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True, exist_ok=True)
    labels = inputs.dataset.labels
    classes = labels.classes()
    rows = []
    panels = [(0, inputs.cube)] + [(int(t), None) for t in start_timestamps]
    for t, rec in panels:
        if rec is None:
            rec = reconstruct_cube(inputs.cube, net, sched, t, cfg.seed)
        Image.fromarray(false_color(rec, bands), mode="RGB").save(d / f"panel_t{t}.png")
        with open(d / f"curves_t{t}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["band"] + [f"class_{c}" for c in classes])
            means = [rec[labels.labels == c].mean(axis=0) for c in classes]
            for band in range(rec.shape[2]):
                w.writerow([band] + [repr(float(m[band])) for m in means])
        rows.append({"start_t": t, "mse": float(((rec - inputs.cube) ** 2).mean())})
    with open(d / "mse.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["start_t", "mse"])
        w.writeheader()
        w.writerows(rows)
    return rows
