"""Per-pixel diffusion features: denoiser tap activations reduced by PCA."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import ndk
from .diffusion import NoiseSchedule, forward_sample
from .hsio import read_raster, write_raster
from .ssdn import SsdnNetwork, ssdn_activations


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray  # D_in
    components: np.ndarray  # D_out x D_in, orthonormal rows
    explained_variance: np.ndarray  # D_out, nonincreasing

    def project(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T

    def reconstruct(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) @ self.components + self.mean

    def save(self, path) -> None:
        ndk.save_checkpoint(path, {
            "mean": torch.from_numpy(self.mean.astype(np.float32)),
            "components": torch.from_numpy(self.components.astype(np.float32)),
            "explained_variance": torch.from_numpy(self.explained_variance.astype(np.float32)),
        }, {"kind": "pca"})

    @classmethod
    def load(cls, path) -> "PcaModel":
        t, _ = ndk.load_checkpoint(path)
        return cls(*(t[k].numpy().astype(np.float64) for k in ("mean", "components", "explained_variance")))


def fit_pca(samples: np.ndarray, d_out: int) -> PcaModel:
    """Top ``d_out`` principal axes of the sample covariance (via SVD).

    Signs are fixed so that each component's largest-magnitude coordinate is
    positive. If the data has rank below ``d_out`` the trailing components
    span the null space and carry zero variance.
    """
    x = np.asarray(samples, dtype=np.float64)
    n, d_in = x.shape
    if not 1 <= d_out <= d_in:
        raise ValueError(f"d_out must lie in 1..{d_in}, got {d_out}")
    if n <= d_out:
        raise ValueError(f"need more samples ({n}) than components ({d_out})")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=True)
    var = np.zeros(d_in)
    var[: s.size] = s**2 / (n - 1)
    comps = vt[:d_out].copy()
    rank = int((var > var.max() * 1e-12).sum()) if var.max() > 0 else 0
    if rank < d_out:
        warnings.warn(f"data rank {rank} below requested {d_out} components; padding with zero-variance axes")
        var[rank:] = 0.0
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    return PcaModel(mean, comps, var[:d_out])


@dataclass
class FeatureCube:
    data: np.ndarray  # H x W x D, float32
    provenance: dict = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def save(self, path) -> None:
        write_raster(path, self.data, {"name": "features", "provenance": self.provenance})

    @classmethod
    def load(cls, path) -> "FeatureCube":
        data, header = read_raster(path)
        return cls(data, header.get("provenance", {}))


@torch.no_grad()
def tap_features(
    cube: np.ndarray,
    net: SsdnNetwork,
    sched: NoiseSchedule,
    t: int,
    layer_index: int,
    noise_seed: int,
    batch: int = 64,
) -> np.ndarray:
    """Raw per-pixel activation vectors, H x W x (channels * spectral extent).

    The cube is tiled with non-overlapping K x K tiles (mirror-padded at the
    far edges); every tile is noised to step ``t`` with the same noise draw.
    """
    k = net.config.patch_size
    h, w, b = cube.shape
    if b != net.config.bands:
        raise ValueError(f"cube has {b} bands, network expects {net.config.bands}")
    sched.check_t(t)
    ph, pw = -(-h // k) * k, -(-w // k) * k
    padded = np.pad(cube, ((0, ph - h), (0, pw - w), (0, 0)), mode="symmetric")
    tiles = padded.reshape(ph // k, k, pw // k, k, b).transpose(0, 2, 1, 3, 4).reshape(-1, k, k, b)
    noise = torch.randn((k, k, b), generator=ndk.generator(noise_seed))
    net.eval()
    chunks = []
    for i in range(0, len(tiles), batch):
        x0 = torch.from_numpy(np.ascontiguousarray(tiles[i : i + batch]))
        x_t = forward_sample(x0, t, noise.expand_as(x0), sched)
        act = ssdn_activations(net, x_t, t, layer_index)  # n x C x D x K x K
        n, c, d = act.shape[:3]
        chunks.append(act.permute(0, 3, 4, 1, 2).reshape(n, k, k, c * d).numpy())
    feats = np.concatenate(chunks)
    dim = feats.shape[-1]
    grid = feats.reshape(ph // k, pw // k, k, k, dim).transpose(0, 2, 1, 3, 4).reshape(ph, pw, dim)
    return grid[:h, :w]


def extract_features(
    cube: np.ndarray,
    net: SsdnNetwork,
    sched: NoiseSchedule,
    t: int,
    layer_index: int,
    fit_indices: np.ndarray | None = None,
    pca: PcaModel | None = None,
    pca_dim: int = 64,
    noise_seed: int = 0,
) -> tuple[FeatureCube, PcaModel]:
    """Diffusion features for every pixel of a normalized cube.

    Without a ``pca`` model one is fitted on the pixels in ``fit_indices``
    (flat indices; the training split) and returned alongside the features.
    """
    raw = tap_features(cube, net, sched, t, layer_index, noise_seed)
    h, w, d_in = raw.shape
    flat = raw.reshape(-1, d_in)
    if pca is None:
        if fit_indices is None or len(fit_indices) == 0:
            raise ValueError("fitting PCA needs a non-empty set of pixel indices")
        d_out = min(pca_dim, d_in, len(fit_indices) - 1)
        pca = fit_pca(flat[np.asarray(fit_indices)], d_out)
    elif pca.components.shape[1] != d_in:
        raise ValueError("PCA model does not match the activation width")
    data = pca.project(flat).reshape(h, w, -1).astype(np.float32)
    if not np.isfinite(data).all():
        raise FloatingPointError("non-finite diffusion features")
    prov = {
        "timestamp": int(t),
        "layer_index": int(layer_index),
        "noise_seed": int(noise_seed),
        "pca_dim": int(pca.components.shape[0]),
        "activation_dim": int(d_in),
    }
    return FeatureCube(data, prov), pca
