"""Desk-scale synthetic hyperspectral scenes with known labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hsio import HsiCube, LabelMap


@dataclass(frozen=True)
class SynthParams:
    height: int = 32
    width: int = 32
    bands: int = 16
    n_classes: int = 2
    separation: float = 0.3  # delta: amplitude of class-specific spectral deviation
    noise: float = 0.05  # sigma: per-pixel, per-band Gaussian noise
    sites_per_class: int = 2
    seed: int = 0

    def __post_init__(self):
        if min(self.height, self.width, self.bands) < 1 or self.n_classes < 1:
            raise ValueError("height, width, bands and n_classes must be positive")
        if self.separation < 0 or self.noise < 0 or self.sites_per_class < 1:
            raise ValueError("separation and noise must be >= 0, sites_per_class >= 1")


PRESETS = {
    "default": dict(separation=0.3, noise=0.05),
    "hard": dict(separation=0.04, noise=0.12),
}


def preset(name: str, **overrides) -> SynthParams:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return SynthParams(**(PRESETS[name] | overrides))


def _smooth_curve(rng: np.random.Generator, bands: int, bumps: int = 3) -> np.ndarray:
    x = np.linspace(0.0, 1.0, bands)
    y = np.zeros(bands)
    for _ in range(bumps):
        mu, width = rng.uniform(0, 1), rng.uniform(0.08, 0.3)
        y += rng.choice([-1.0, 1.0]) * np.exp(-0.5 * ((x - mu) / width) ** 2)
    peak = np.abs(y).max()
    return y / peak if peak > 0 else y


def signatures(p: SynthParams, rng: np.random.Generator) -> np.ndarray:
    """C x B mean spectra: a shared smooth base plus separation * class deviation."""
    x = np.linspace(0.0, 1.0, p.bands)
    base = 0.5 + 0.15 * np.sin(2 * np.pi * x * rng.uniform(0.5, 1.5) + rng.uniform(0, 2 * np.pi))
    return np.stack([base + p.separation * _smooth_curve(rng, p.bands) for _ in range(p.n_classes)])


def regions(p: SynthParams, rng: np.random.Generator) -> np.ndarray:
    """Voronoi partition into ``sites_per_class`` cells per class, labels 1..C."""
    n_sites = p.n_classes * p.sites_per_class
    sites = rng.uniform([0, 0], [p.height, p.width], size=(n_sites, 2))
    owner = rng.permutation(np.arange(n_sites) % p.n_classes) + 1
    rr, cc = np.mgrid[0 : p.height, 0 : p.width]
    d = (rr[..., None] + 0.5 - sites[:, 0]) ** 2 + (cc[..., None] + 0.5 - sites[:, 1]) ** 2
    return owner[d.argmin(axis=-1)]


def generate(p: SynthParams) -> tuple[HsiCube, LabelMap, np.ndarray]:
    """Returns the cube, its label map and the noiseless class signatures."""
    rng = np.random.default_rng(p.seed)
    sig = signatures(p, rng)
    lab = regions(p, rng)
    data = sig[lab - 1] + p.noise * rng.standard_normal((p.height, p.width, p.bands))
    return HsiCube(data.astype(np.float32), name=f"synth-{p.seed}"), LabelMap(lab.astype(np.int64)), sig


def nearest_mean_oa(cube: np.ndarray, labels: np.ndarray, train_idx: np.ndarray, test_idx: np.ndarray) -> float:
    """Baseline: assign each test pixel the class with the closest training mean spectrum."""
    flat = cube.reshape(-1, cube.shape[-1])
    y = labels.ravel()
    classes = np.unique(y[train_idx])
    means = np.stack([flat[train_idx][y[train_idx] == c].mean(axis=0) for c in classes])
    d = ((flat[test_idx, None, :] - means[None]) ** 2).sum(-1)
    return float((classes[d.argmin(1)] == y[test_idx]).mean())
