"""Hyperspectral cube containers, normalization, patches and train/test splits.

A cube container is a directory::

    header.json   {height, width, bands, dtype: "f32", byte_order: "little",
                   layout: "band-interleaved-by-pixel", name}
    data.bin      float32 little-endian, row-major over (row, col, band)
    labels.bin    uint16 little-endian, row-major over (row, col); 0 = unlabeled
    classes.json  optional {id: name} or {id: {"name": ..., "color": [r, g, b]}}
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np


class CubeFormatError(ValueError):
    """Raised for malformed cube containers or CSV sources."""


@dataclass(frozen=True)
class HsiCube:
    data: np.ndarray  # H x W x B, float32
    name: str = "cube"

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"cube data must be H x W x B with every extent >= 1, got {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class LabelMap:
    labels: np.ndarray  # H x W, int; 0 = unlabeled

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise ValueError("label map must be 2-D")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0

    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels) if c > 0)

    def labeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels.ravel() > 0)


@dataclass(frozen=True)
class Instance:
    patch: np.ndarray  # K x K x B
    center_row: int
    center_col: int
    label: int = 0


@dataclass(frozen=True)
class SplitSpec:
    per_class_train_counts: Mapping[int, int] | None = None
    train_ratio: float | None = None
    seed: int = 0
    min_per_class: int = 2

    def __post_init__(self):
        if (self.per_class_train_counts is None) == (self.train_ratio is None):
            raise ValueError("give exactly one of per_class_train_counts or train_ratio")
        if self.train_ratio is not None and not 0.0 < self.train_ratio < 1.0:
            raise ValueError(f"train_ratio must lie in (0, 1), got {self.train_ratio}")


@dataclass
class Dataset:
    """A cube with its label map and optional class metadata."""

    cube: HsiCube
    labels: LabelMap
    classes: dict[int, dict] = field(default_factory=dict)

    def __post_init__(self):
        if self.labels.labels.shape != self.cube.data.shape[:2]:
            raise ValueError(
                f"label map {self.labels.labels.shape} does not match cube {self.cube.data.shape[:2]}"
            )


# --------------------------------------------------------------------------
# container I/O


def _read_header(root: Path) -> dict:
    try:
        header = json.loads((root / "header.json").read_text())
    except FileNotFoundError:
        raise CubeFormatError(f"{root}: missing header.json") from None
    except json.JSONDecodeError as exc:
        raise CubeFormatError(f"{root}: corrupt header.json ({exc})") from None
    for key in ("height", "width", "bands"):
        if not isinstance(header.get(key), int) or header[key] < 1:
            raise CubeFormatError(f"{root}: header field {key!r} missing or invalid")
    if header.get("dtype", "f32") != "f32" or header.get("byte_order", "little") != "little":
        raise CubeFormatError(f"{root}: only little-endian f32 payloads are supported")
    if header.get("layout", "band-interleaved-by-pixel") != "band-interleaved-by-pixel":
        raise CubeFormatError(f"{root}: unsupported layout {header.get('layout')!r}")
    return header


def read_raster(root, expected_bands: int | None = None) -> tuple[np.ndarray, dict]:
    """Read the header and float payload of a container directory."""
    root = Path(root)
    header = _read_header(root)
    h, w, b = header["height"], header["width"], header["bands"]
    if expected_bands is not None and b != expected_bands:
        raise CubeFormatError(f"{root}: expected {expected_bands} bands, header says {b}")
    payload = (root / "data.bin").read_bytes()
    if len(payload) != h * w * b * 4:
        raise CubeFormatError(
            f"{root}: payload size mismatch ({len(payload)} bytes, expected {h * w * b * 4})"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, b).astype(np.float32)
    if not np.isfinite(data).all():
        raise CubeFormatError(f"{root}: non-finite values in payload")
    return data, header


def write_raster(root, data: np.ndarray, extra_header: Mapping | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    h, w, b = data.shape
    header = {
        "height": h,
        "width": w,
        "bands": b,
        "dtype": "f32",
        "byte_order": "little",
        "layout": "band-interleaved-by-pixel",
    }
    header.update(extra_header or {})
    (root / "data.bin").write_bytes(np.ascontiguousarray(data, dtype="<f4").tobytes())
    (root / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True))


def load_cube(path) -> HsiCube:
    data, header = read_raster(path)
    return HsiCube(data, name=header.get("name", Path(path).name))


def load_labels(path, height: int, width: int) -> LabelMap:
    f = Path(path) / "labels.bin"
    if not f.exists():
        return LabelMap(np.zeros((height, width), dtype=np.int64))
    raw = f.read_bytes()
    if len(raw) != height * width * 2:
        raise CubeFormatError(f"{path}: labels.bin size mismatch")
    return LabelMap(np.frombuffer(raw, dtype="<u2").reshape(height, width).astype(np.int64))


def load_classes(path) -> dict[int, dict]:
    f = Path(path) / "classes.json"
    if not f.exists():
        return {}
    out = {}
    for k, v in json.loads(f.read_text()).items():
        out[int(k)] = v if isinstance(v, dict) else {"name": str(v)}
    return out


def load_dataset(path) -> Dataset:
    cube = load_cube(path)
    labels = load_labels(path, cube.height, cube.width)
    return Dataset(cube, labels, load_classes(path))


def save_dataset(path, cube: HsiCube, labels: LabelMap | None = None, classes: Mapping | None = None) -> None:
    path = Path(path)
    write_raster(path, cube.data, {"name": cube.name})
    if labels is not None:
        if labels.labels.shape != cube.data.shape[:2]:
            raise ValueError("label map does not match cube")
        if labels.labels.min() < 0 or labels.labels.max() > np.iinfo(np.uint16).max:
            raise ValueError("labels out of uint16 range")
        (path / "labels.bin").write_bytes(np.ascontiguousarray(labels.labels, dtype="<u2").tobytes())
    if classes:
        (path / "classes.json").write_text(
            json.dumps({str(k): v for k, v in sorted(classes.items())}, indent=2)
        )


def read_csv_cube(path, labels_path=None) -> tuple[HsiCube, LabelMap | None]:
    """Build a cube from ``row,col,band,value`` CSV rows (header optional).

    Every (row, col, band) cell of the bounding grid must appear exactly once.
    ``labels_path`` optionally points at a ``row,col,label`` CSV.
    """
    cells: dict[tuple[int, int, int], float] = {}
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), 1):
            if not rec or (lineno == 1 and not rec[0].strip().lstrip("-").isdigit()):
                continue
            if len(rec) != 4:
                raise CubeFormatError(f"{path}:{lineno}: expected row,col,band,value")
            try:
                key = (int(rec[0]), int(rec[1]), int(rec[2]))
                value = float(rec[3])
            except ValueError:
                raise CubeFormatError(f"{path}:{lineno}: unparsable record {rec}") from None
            if min(key) < 0:
                raise CubeFormatError(f"{path}:{lineno}: negative index")
            if key in cells:
                raise CubeFormatError(f"{path}:{lineno}: duplicate cell {key}")
            cells[key] = value
    if not cells:
        raise CubeFormatError(f"{path}: no data rows")
    h, w, b = (max(k[i] for k in cells) + 1 for i in range(3))
    if len(cells) != h * w * b:
        raise CubeFormatError(f"{path}: {len(cells)} cells do not fill a {h}x{w}x{b} grid")
    data = np.empty((h, w, b), dtype=np.float32)
    for (r, c, k), v in cells.items():
        data[r, c, k] = v
    if not np.isfinite(data).all():
        raise CubeFormatError(f"{path}: non-finite values")
    labels = None
    if labels_path is not None:
        lab = np.zeros((h, w), dtype=np.int64)
        with open(labels_path, newline="") as fh:
            for rec in csv.reader(fh):
                if not rec or not rec[0].strip().isdigit():
                    continue
                lab[int(rec[0]), int(rec[1])] = int(rec[2])
        labels = LabelMap(lab)
    return HsiCube(data, name=Path(path).stem), labels


# --------------------------------------------------------------------------
# transforms


def normalize_bands(cube: HsiCube) -> HsiCube:
    """Per-band min-max scaling to [0, 1]; constant bands become 0."""
    x = cube.data.astype(np.float64)
    if not np.isfinite(x).all():
        raise ValueError("cannot normalize a cube with non-finite values")
    lo = x.min(axis=(0, 1), keepdims=True)
    span = x.max(axis=(0, 1), keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (x - lo) / safe, 0.0)
    return HsiCube(np.clip(out, 0.0, 1.0).astype(np.float32), name=cube.name)


def _window(center: int, k: int, n: int) -> np.ndarray:
    """Mirror-reflected indices of a k-wide window starting k//2 before ``center``.

    The reflection repeats the edge pixel (index -1 maps to 0, n maps to n-1).
    """
    idx = np.arange(center - k // 2, center - k // 2 + k)
    idx = np.where(idx < 0, -idx - 1, idx)
    return np.where(idx >= n, 2 * n - 1 - idx, idx)


def extract_patch(cube: HsiCube | np.ndarray, row: int, col: int, k: int, label: int = 0) -> Instance:
    """K x K x B neighbourhood around (row, col), mirror-padded at the borders.

    For even K the window spans ``row - K//2 .. row + K//2 - 1``.
    """
    data = cube.data if isinstance(cube, HsiCube) else cube
    h, w = data.shape[:2]
    if k < 1:
        raise ValueError(f"patch size must be >= 1, got {k}")
    if k > 2 * min(h, w):
        raise ValueError(f"patch size {k} exceeds twice the smallest image side ({min(h, w)})")
    if not (0 <= row < h and 0 <= col < w):
        raise IndexError(f"pixel ({row}, {col}) outside a {h}x{w} image")
    rows, cols = _window(row, k, h), _window(col, k, w)
    return Instance(data[np.ix_(rows, cols)], row, col, label)


def extract_patches(data: np.ndarray, flat_indices: np.ndarray, k: int) -> np.ndarray:
    """Vectorised ``extract_patch`` for many pixels: returns N x K x K x B."""
    h, w = data.shape[:2]
    if k > 2 * min(h, w):
        raise ValueError(f"patch size {k} exceeds twice the smallest image side ({min(h, w)})")
    lo = k // 2
    padded = np.pad(data, ((lo, k - 1 - lo), (lo, k - 1 - lo), (0, 0)), mode="symmetric")
    rows, cols = np.divmod(np.asarray(flat_indices, dtype=np.int64), w)
    off = np.arange(k)
    r = rows[:, None, None] + off[None, :, None]
    c = cols[:, None, None] + off[None, None, :]
    return padded[r, c]


def stratified_split(labels: LabelMap, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-class random train/test partition of the labeled pixels.

    Returns sorted flat pixel indices (row * width + col). In ratio mode each
    class gets ``max(floor(ratio * n_c), min_per_class)`` training pixels.
    """
    flat = labels.labels.ravel()
    rng = np.random.default_rng(spec.seed)
    train, test = [], []
    for c in labels.classes():
        idx = np.flatnonzero(flat == c)
        n_c = idx.size
        if spec.per_class_train_counts is not None:
            want = int(spec.per_class_train_counts.get(c, 0))
        else:
            want = max(int(np.floor(spec.train_ratio * n_c)), spec.min_per_class)
        if want > n_c:
            raise ValueError(f"class {c} has {n_c} labeled pixels, {want} requested for training")
        perm = rng.permutation(idx)
        train.append(perm[:want])
        test.append(perm[want:])
    if spec.per_class_train_counts is not None:
        unknown = set(spec.per_class_train_counts) - set(labels.classes())
        if unknown:
            raise ValueError(f"train counts given for absent classes {sorted(unknown)}")
    cat = lambda parts: np.sort(np.concatenate(parts)) if parts else np.empty(0, np.int64)
    return cat(train), cat(test)
