"""Accuracy metrics and classification-map rendering."""

from __future__ import annotations

import colorsys
import csv
import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image

from .hsio import LabelMap

GOLDEN = 0.618033988749895


@dataclass
class EvalReport:
    confusion: list[list[int]]  # rows = truth, cols = prediction
    per_class_accuracy: list[float | None]  # None where a class has no test pixels
    oa: float
    aa: float
    kappa: float
    n_test: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text()))


def confusion_matrix(truth: np.ndarray, pred: np.ndarray, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth - 1, pred - 1), 1)
    return cm


def report_from_confusion(cm: np.ndarray) -> EvalReport:
    cm = np.asarray(cm, dtype=np.int64)
    n = int(cm.sum())
    if n == 0:
        raise ValueError("empty test set")
    support = cm.sum(axis=1)
    diag = np.diag(cm)
    per_class = [float(d / s) if s else None for d, s in zip(diag, support)]
    present = [a for a in per_class if a is not None]
    if len(present) < len(per_class):
        warnings.warn("classes without test pixels are excluded from AA")
    p_o = diag.sum() / n
    p_e = float((support * cm.sum(axis=0)).sum()) / n**2
    if p_e >= 1.0:
        kappa = 1.0 if p_o == 1.0 else 0.0
    else:
        kappa = float((p_o - p_e) / (1.0 - p_e))
    return EvalReport(
        confusion=cm.tolist(),
        per_class_accuracy=per_class,
        oa=float(p_o),
        aa=float(np.mean(present)),
        kappa=kappa,
        n_test=n,
    )


def evaluate(pred: LabelMap, truth: LabelMap, test_indices: np.ndarray, n_classes: int | None = None) -> EvalReport:
    """OA, AA, Cohen's kappa and the confusion matrix over ``test_indices``."""
    idx = np.asarray(test_indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty test set")
    if pred.labels.shape != truth.labels.shape:
        raise ValueError("prediction and truth maps differ in shape")
    t = truth.labels.ravel()[idx]
    p = pred.labels.ravel()[idx]
    c = n_classes or truth.n_classes
    if (t < 1).any() or (t > c).any():
        raise ValueError("test indices must point at labeled truth pixels")
    if (p < 1).any() or (p > c).any():
        raise ValueError(f"predicted class outside 1..{c}")
    return report_from_confusion(confusion_matrix(t, p, c))


def format_table(report: EvalReport, class_names: Mapping[int, str] | None = None) -> str:
    """Per-class accuracy rows followed by OA, AA and kappa, all in percent."""
    names = class_names or {}
    rows = []
    for i, acc in enumerate(report.per_class_accuracy, 1):
        val = "-" if acc is None else f"{100 * acc:.2f}"
        rows.append((f"{i} {names.get(i, '')}".rstrip(), val))
    rows += [("OA(%)", f"{100 * report.oa:.2f}"), ("AA(%)", f"{100 * report.aa:.2f}"),
             ("kappa*100", f"{100 * report.kappa:.2f}")]
    width = max(len(r[0]) for r in rows)
    lines = [f"{'Class':<{width}}  Accuracy"]
    for j, (k, v) in enumerate(rows):
        if j == len(report.per_class_accuracy):
            lines.append("-" * (width + 10))
        lines.append(f"{k:<{width}}  {v:>8}")
    return "\n".join(lines)


def write_report_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for i, acc in enumerate(report.per_class_accuracy, 1):
            w.writerow([f"class_{i}", "" if acc is None else acc])
        w.writerows([["oa", report.oa], ["aa", report.aa], ["kappa", report.kappa],
                     ["n_test", report.n_test]])


def default_palette(n_classes: int, classes: Mapping[int, dict] | None = None) -> dict[int, tuple[int, int, int]]:
    """Class id -> RGB. Hues step by the golden ratio; 0 (unlabeled) is black."""
    pal = {0: (0, 0, 0)}
    for c in range(1, n_classes + 1):
        h = (c * GOLDEN) % 1.0
        v = 0.95 if c % 2 else 0.75
        r, g, b = colorsys.hsv_to_rgb(h, 0.85, v)
        pal[c] = (round(r * 255), round(g * 255), round(b * 255))
    for c, meta in (classes or {}).items():
        if isinstance(meta, dict) and "color" in meta:
            pal[int(c)] = tuple(int(x) for x in meta["color"])
    return pal


def render_map(labels: LabelMap, palette: Mapping[int, tuple[int, int, int]], path) -> None:
    """Write a lossless PNG with one pixel per label-map cell."""
    lab = labels.labels
    missing = sorted(set(np.unique(lab).tolist()) - set(palette))
    if missing:
        raise KeyError(f"palette has no colour for classes {missing}")
    lut = np.zeros((max(palette) + 1, 3), dtype=np.uint8)
    for c, rgb in palette.items():
        lut[c] = rgb
    Image.fromarray(lut[lab], mode="RGB").save(path, format="PNG", optimize=False)


def decode_map(path, palette: Mapping[int, tuple[int, int, int]]) -> LabelMap:
    rgb = np.asarray(Image.open(path).convert("RGB"))
    inverse = {tuple(v): k for k, v in palette.items()}
    h, w = rgb.shape[:2]
    flat = rgb.reshape(-1, 3)
    out = np.empty(h * w, dtype=np.int64)
    for i, px in enumerate(map(tuple, flat)):
        if px not in inverse:
            raise ValueError(f"colour {px} not in palette")
        out[i] = inverse[px]
    return LabelMap(out.reshape(h, w))
