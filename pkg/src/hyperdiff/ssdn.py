"""Spectral-spatial denoising network: a 3-D U-Net over K x K x B instances.

The spectral axis is treated as depth and is halved by each down block and
doubled by each up block; spatial extents never change. Activations entering
the up blocks are recorded as taps ``up_in_0`` (most compressed) to
``up_in_2`` (closest to the output).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import Tensor, nn

from . import ndk

TAP_NAMES = ("up_in_0", "up_in_1", "up_in_2")


@dataclass(frozen=True)
class SsdnConfig:
    patch_size: int = 16
    bands: int = 16
    base_channels: int = 8
    depth: int = 3
    kernel: int = 3
    time_embed_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.depth != 3:
            raise ValueError("the denoiser uses exactly 3 down and 3 up blocks")
        if self.kernel != 3:
            raise ValueError("only 3x3x3 kernels are supported")
        if min(self.patch_size, self.bands, self.base_channels) < 1:
            raise ValueError("patch_size, bands and base_channels must be positive")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be a positive even number")

    @property
    def padded_bands(self) -> int:
        m = 2**self.depth
        return -(-self.bands // m) * m

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2**i for i in range(self.depth))


def timestep_embedding(t: Tensor, dim: int) -> Tensor:
    """Sinusoidal embedding, N -> N x dim (sin half then cos half)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.to(torch.float32)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _Block(nn.Module):
    """[conv|deconv, BN, ReLU] -> + time bias -> [conv, BN, ReLU], stride 2 on the spectral axis."""

    def __init__(self, c_in, c_out, temb, up: bool, gen):
        super().__init__()
        layer = ndk.Deconv3d if up else ndk.Conv3d
        self.resample = layer(c_in, c_out, 3, (2, 1, 1), 1, gen=gen)
        self.bn1 = ndk.BatchNorm3d(c_out)
        self.time = ndk.Linear(temb, c_out, gen=gen)
        self.conv = ndk.Conv3d(c_out, c_out, 3, 1, 1, gen=gen)
        self.bn2 = ndk.BatchNorm3d(c_out)

    def forward(self, x, emb):
        h = ndk.relu(self.bn1(self.resample(x)))
        h = h + ndk.relu(self.time(emb))[:, :, None, None, None]
        return ndk.relu(self.bn2(self.conv(h)))


class SsdnNetwork(nn.Module):
    def __init__(self, config: SsdnConfig):
        super().__init__()
        self.config = config
        gen = ndk.generator(config.seed)
        w = config.widths
        e = config.time_embed_dim
        self.stem = ndk.Conv3d(1, w[0], 3, 1, 1, gen=gen)
        self.down = nn.ModuleList([
            _Block(w[0], w[0], e, False, gen),
            _Block(w[0], w[1], e, False, gen),
            _Block(w[1], w[2], e, False, gen),
        ])
        # up block j consumes the previous up output concatenated with the
        # matching down output (up 0 consumes the deepest down output directly)
        self.up = nn.ModuleList([
            _Block(w[2], w[1], e, True, gen),
            _Block(2 * w[1], w[0], e, True, gen),
            _Block(2 * w[0], w[0], e, True, gen),
        ])
        self.head = ndk.Conv3d(w[0], 1, 3, 1, 1, gen=gen)
        self.taps: dict[str, Tensor] = {}
        self.eval()

    # (N, K, K, B) <-> (N, 1, B_pad, K, K)
    def _to_volume(self, x: Tensor) -> Tensor:
        c = self.config
        if x.dim() != 4 or x.shape[1:] != (c.patch_size, c.patch_size, c.bands):
            raise ValueError(
                f"expected N x {c.patch_size} x {c.patch_size} x {c.bands}, got {tuple(x.shape)}"
            )
        v = x.permute(0, 3, 1, 2)
        if c.padded_bands != c.bands:
            v = torch.nn.functional.pad(v, (0, 0, 0, 0, 0, c.padded_bands - c.bands))
        return v.unsqueeze(1)

    def _from_volume(self, v: Tensor) -> Tensor:
        return v[:, 0, : self.config.bands].permute(0, 2, 3, 1)

    def embed(self, t, n: int) -> Tensor:
        t = torch.as_tensor(t)
        if t.dim() == 0:
            t = t.expand(n)
        return timestep_embedding(t, self.config.time_embed_dim).to(self.stem.weight.dtype)

    def forward(self, x: Tensor, t, capture: bool = False) -> Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        emb = self.embed(t, x.shape[0])
        h = self.stem(self._to_volume(x))
        skips = []
        for block in self.down:
            h = block(h, emb)
            skips.append(h)
        taps = {}
        for j, block in enumerate(self.up):
            if j > 0:
                h = torch.cat([h, skips[-1 - j]], dim=1)
            if capture:
                taps[TAP_NAMES[j]] = h
            h = block(h, emb)
        out = self._from_volume(self.head(h))
        if capture:
            self.taps = taps
        if not torch.isfinite(out).all():
            raise FloatingPointError("non-finite denoiser output")
        return out[0] if squeeze else out


def build_ssdn(config: SsdnConfig) -> SsdnNetwork:
    return SsdnNetwork(config)


def ssdn_forward(net: SsdnNetwork, x_t: Tensor, t) -> Tensor:
    return net(x_t, t)


def ssdn_activations(net: SsdnNetwork, x_t: Tensor, t, layer_index: int) -> Tensor:
    """Tensor entering up block ``layer_index``: N x C x D_spec x K x K."""
    if layer_index not in (0, 1, 2):
        raise ValueError(f"layer_index must be 0, 1 or 2, got {layer_index}")
    net(x_t, t, capture=True)
    return net.taps[TAP_NAMES[layer_index]]


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def save_ssdn(net: SsdnNetwork, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ssdn_config.json").write_text(json.dumps(asdict(net.config), indent=2))
    ndk.save_checkpoint(out / "model.ckpt", ndk.module_tensors(net))


def load_ssdn(out_dir) -> SsdnNetwork:
    out = Path(out_dir)
    net = SsdnNetwork(SsdnConfig(**json.loads((out / "ssdn_config.json").read_text())))
    tensors, _ = ndk.load_checkpoint(out / "model.ckpt")
    ndk.load_module_tensors(net, tensors)
    net.eval()
    return net
