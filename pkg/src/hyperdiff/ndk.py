"""Differentiable numeric kernel.

Thin, shape-checked wrappers over torch for the handful of operators the
denoiser and the classifier use, plus explicitly seeded parameter init,
an Adam optimizer with inspectable state, and a flat binary checkpoint format.

Everything runs in float32 on the CPU. All randomness takes an explicit
``torch.Generator``; nothing here touches the global RNG.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

DTYPE = torch.float32
CKPT_MAGIC = b"HDCKPT01"
CKPT_FORMAT_VERSION = 1

Parameter = nn.Parameter


def generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


def conv_out_extent(n: int, k: int, p: int, s: int) -> int:
    """Output extent of a strided, padded convolution along one axis."""
    out = (n + 2 * p - k) // s + 1
    if out <= 0:
        raise ValueError(f"non-positive output extent for n={n}, k={k}, p={p}, s={s}")
    return out


# --------------------------------------------------------------------------
# operator catalog


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=1) -> Tensor:
    """3-D convolution over (C, D, H, W) or (N, C, D, H, W) input."""
    if x.dim() not in (4, 5):
        raise ValueError(f"conv3d expects a 4-D or 5-D input, got shape {tuple(x.shape)}")
    if weight.dim() != 5:
        raise ValueError("conv3d kernel must be C_out x C_in x kd x kh x kw")
    c_in = x.shape[-4]
    if weight.shape[1] != c_in:
        raise ValueError(f"conv3d channel mismatch: input {c_in}, kernel {weight.shape[1]}")
    stride, padding = _triple(stride), _triple(padding)
    for n, k, p, s in zip(x.shape[-3:], weight.shape[2:], padding, stride):
        conv_out_extent(n, k, p, s)
    return F.conv3d(x, weight, bias, stride=stride, padding=padding)


def deconv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride=(2, 1, 1),
    padding=1,
    output_padding=None,
) -> Tensor:
    """Transposed 3-D convolution (the adjoint of ``conv3d`` with the same geometry).

    ``weight`` is C_in x C_out x k x k x k. By default ``output_padding`` is
    chosen so that every stride-2 axis exactly doubles, undoing a stride-2,
    kernel-3, pad-1 ``conv3d`` on even extents.
    """
    if x.dim() not in (4, 5):
        raise ValueError(f"deconv3d expects a 4-D or 5-D input, got shape {tuple(x.shape)}")
    if weight.shape[0] != x.shape[-4]:
        raise ValueError(f"deconv3d channel mismatch: input {x.shape[-4]}, kernel {weight.shape[0]}")
    stride, padding = _triple(stride), _triple(padding)
    if output_padding is None:
        output_padding = tuple(s - 1 for s in stride)
    output_padding = _triple(output_padding)
    for n, k, p, s, op in zip(x.shape[-3:], weight.shape[2:], padding, stride, output_padding):
        if (n - 1) * s - 2 * p + k + op <= 0:
            raise ValueError("deconv3d geometry produces a non-positive extent")
    return F.conv_transpose3d(
        x, weight, bias, stride=stride, padding=padding, output_padding=output_padding
    )


def batchnorm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of an (N, C, D, H, W) tensor.

    Training mode uses batch statistics and updates the running buffers in
    place; inference mode uses the running statistics only.
    """
    if x.dim() != 5:
        raise ValueError(f"batchnorm3d expects N x C x D x H x W, got {tuple(x.shape)}")
    if gamma.shape != (x.shape[1],):
        raise ValueError("batchnorm3d scale does not match channel count")
    return F.batch_norm(x, running_mean, running_var, gamma, beta, training, momentum, eps)


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight in_features {weight.shape[1]}")
    return F.linear(x, weight, bias)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.softmax(x, dim=dim)


def log_softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.log_softmax(x, dim=dim)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (x.shape[-1],):
        raise ValueError("layer_norm scale does not match the trailing axis")
    return F.layer_norm(x, (x.shape[-1],), gamma, beta, eps)


def multi_head_attention(
    x: Tensor,
    w_qkv: Tensor,
    b_qkv: Tensor,
    w_out: Tensor,
    b_out: Tensor,
    heads: int,
) -> Tensor:
    """Scaled dot-product self-attention over a (N, L, E) token sequence.

    ``w_qkv`` stacks the query, key and value projections (3E x E).
    """
    n, length, dim = x.shape
    if dim % heads:
        raise ValueError(f"heads={heads} does not divide model dim {dim}")
    if w_qkv.shape != (3 * dim, dim):
        raise ValueError("w_qkv must be 3E x E")
    head_dim = dim // heads
    qkv = linear(x, w_qkv, b_qkv).reshape(n, length, 3, heads, head_dim)
    q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each N x heads x L x head_dim
    scores = q @ k.transpose(-2, -1) / math.sqrt(head_dim)
    attn = softmax(scores, dim=-1)
    out = (attn @ v).transpose(1, 2).reshape(n, length, dim)
    return linear(out, w_out, b_out)


def mean_pool(x: Tensor, dim: int = 1) -> Tensor:
    return x.mean(dim=dim)


def cross_entropy(logits: Tensor, target: Tensor) -> Tensor:
    """Mean negative log-likelihood of integer targets (0-based)."""
    logp = log_softmax(logits, dim=-1)
    return -logp.gather(1, target.view(-1, 1)).mean()


def dropout(x: Tensor, p: float, training: bool, gen: torch.Generator | None) -> Tensor:
    if not training or p == 0.0:
        return x
    if gen is None:
        raise ValueError("dropout in training mode needs an explicit generator")
    keep = (torch.rand(x.shape, generator=gen) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


# --------------------------------------------------------------------------
# layers


def kaiming_uniform(shape: Sequence[int], fan_in: int, gen: torch.Generator) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return torch.empty(tuple(shape), dtype=DTYPE).uniform_(-bound, bound, generator=gen)


class Conv3d(nn.Module):
    def __init__(self, c_in, c_out, kernel=3, stride=1, padding=1, *, gen: torch.Generator):
        super().__init__()
        k = _triple(kernel)
        self.stride, self.padding = _triple(stride), _triple(padding)
        self.weight = Parameter(kaiming_uniform((c_out, c_in, *k), c_in * math.prod(k), gen))
        self.bias = Parameter(torch.zeros(c_out, dtype=DTYPE))

    def forward(self, x):
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)


class Deconv3d(nn.Module):
    def __init__(self, c_in, c_out, kernel=3, stride=(2, 1, 1), padding=1, *, gen: torch.Generator):
        super().__init__()
        k = _triple(kernel)
        self.stride, self.padding = _triple(stride), _triple(padding)
        self.weight = Parameter(kaiming_uniform((c_in, c_out, *k), c_in * math.prod(k), gen))
        self.bias = Parameter(torch.zeros(c_out, dtype=DTYPE))

    def forward(self, x):
        return deconv3d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm3d(nn.Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = Parameter(torch.ones(channels, dtype=DTYPE))
        self.bias = Parameter(torch.zeros(channels, dtype=DTYPE))
        self.register_buffer("running_mean", torch.zeros(channels, dtype=DTYPE))
        self.register_buffer("running_var", torch.ones(channels, dtype=DTYPE))

    def forward(self, x):
        return batchnorm3d(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, *, gen: torch.Generator):
        super().__init__()
        self.weight = Parameter(kaiming_uniform((d_out, d_in), d_in, gen))
        self.bias = Parameter(torch.zeros(d_out, dtype=DTYPE))

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(torch.ones(dim, dtype=DTYPE))
        self.bias = Parameter(torch.zeros(dim, dtype=DTYPE))

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, *, gen: torch.Generator):
        super().__init__()
        if dim % heads:
            raise ValueError(f"heads={heads} does not divide model dim {dim}")
        self.heads = heads
        self.w_qkv = Parameter(kaiming_uniform((3 * dim, dim), dim, gen))
        self.b_qkv = Parameter(torch.zeros(3 * dim, dtype=DTYPE))
        self.w_out = Parameter(kaiming_uniform((dim, dim), dim, gen))
        self.b_out = Parameter(torch.zeros(dim, dtype=DTYPE))

    def forward(self, x):
        return multi_head_attention(x, self.w_qkv, self.b_qkv, self.w_out, self.b_out, self.heads)


# --------------------------------------------------------------------------
# gradients and optimization


def backward(output: Tensor, params: Iterable[Tensor]) -> None:
    """Accumulate d(output)/d(param) into each ``param.grad``.

    Parameters the output does not depend on get a zero gradient and a warning.
    """
    params = list(params)
    if output.dim() != 0:
        raise ValueError(f"backward needs a scalar output, got shape {tuple(output.shape)}")
    if not torch.isfinite(output):
        raise FloatingPointError("non-finite value reached backward")
    grads = torch.autograd.grad(output, params, allow_unused=True)
    disconnected = 0
    for p, g in zip(params, grads):
        if g is None:
            disconnected += 1
            g = torch.zeros_like(p)
        if p.grad is None:
            p.grad = g.detach().clone()
        else:
            p.grad += g.detach()
    if disconnected:
        warnings.warn(f"{disconnected} parameter(s) not connected to the output; gradient set to 0")


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, Tensor] = field(default_factory=dict)
    second_moment: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def for_params(cls, named_params: Mapping[str, Tensor], **hyper) -> "AdamState":
        state = cls(**hyper)
        for name, p in named_params.items():
            state.first_moment[name] = torch.zeros_like(p, dtype=DTYPE).detach()
            state.second_moment[name] = torch.zeros_like(p, dtype=DTYPE).detach()
        return state

    def tensors(self) -> dict[str, Tensor]:
        out = {f"m/{k}": v for k, v in self.first_moment.items()}
        out.update({f"v/{k}": v for k, v in self.second_moment.items()})
        return out

    def meta(self) -> dict:
        return dict(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                    step_count=self.step_count)

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, Tensor], meta: Mapping) -> "AdamState":
        state = cls(**meta)
        for k, v in tensors.items():
            kind, name = k.split("/", 1)
            (state.first_moment if kind == "m" else state.second_moment)[name] = v
        return state


@torch.no_grad()
def adam_step(named_params: Mapping[str, Tensor], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place. Gradients are left untouched."""
    if state.lr < 0 or not math.isfinite(state.lr):
        raise ValueError(f"learning rate must be >= 0, got {state.lr}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in named_params.items():
        if name not in state.first_moment or name not in state.second_moment:
            raise KeyError(f"no Adam moments for parameter {name!r}")
        if p.grad is None:
            continue
        m, v = state.first_moment[name], state.second_moment[name]
        if m.shape != p.shape:
            raise ValueError(f"moment shape {tuple(m.shape)} != parameter shape {tuple(p.shape)}")
        g = p.grad
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        if state.lr == 0:
            continue
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m / bc1, denom, value=-state.lr)
    return state


# --------------------------------------------------------------------------
# checkpoints
#
# Layout: 8-byte magic, u64 little-endian header length, UTF-8 JSON header,
# then raw little-endian float32 payloads concatenated in sorted name order.


def save_checkpoint(path, tensors: Mapping[str, Tensor], meta: Mapping | None = None) -> None:
    names = sorted(tensors)
    header = {
        "format_version": CKPT_FORMAT_VERSION,
        "names": names,
        "shapes": [list(tensors[n].shape) for n in names],
        "meta": dict(meta or {}),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            arr = tensors[n].detach().cpu().to(DTYPE).numpy()
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    if header.get("format_version") != CKPT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    offset = 16 + hlen
    out = {}
    for name, shape in zip(header["names"], header["shapes"]):
        count = math.prod(shape)
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        out[name] = torch.from_numpy(arr.astype(np.float32))
        offset += 4 * count
    if offset != len(raw):
        raise ValueError(f"{path}: payload size mismatch")
    return out, header["meta"]


def module_tensors(module: nn.Module) -> dict[str, Tensor]:
    """Parameters and buffers of a module, keyed by dotted name."""
    out = dict(module.named_parameters())
    out.update(dict(module.named_buffers()))
    return out


@torch.no_grad()
def load_module_tensors(module: nn.Module, tensors: Mapping[str, Tensor]) -> None:
    own = module_tensors(module)
    missing = set(own) - set(tensors)
    extra = set(tensors) - set(own)
    if missing or extra:
        raise KeyError(f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
    for name, t in own.items():
        if t.shape != tensors[name].shape:
            raise ValueError(f"{name}: shape {tuple(t.shape)} != checkpoint {tuple(tensors[name].shape)}")
        t.copy_(tensors[name])


def named_trainable(module: nn.Module) -> dict[str, Tensor]:
    return {n: p for n, p in module.named_parameters() if p.requires_grad}
