"""Variance schedule, forward noising, reverse posterior and the denoiser training loop.

Timesteps are 1-based: t = 1..T, with the convention alpha_bar(0) = 1.
Instance tensors are laid out N x K x K x B (or any shape; the maths is
elementwise). A "network" is any callable ``net(x_t, t) -> eps_hat`` where
``t`` is an integer tensor with one entry per instance.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, is_dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import Tensor

from . import ndk
from .hsio import extract_patches

log = logging.getLogger(__name__)

Network = Callable[[Tensor, Tensor], Tensor]


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class NoiseSchedule:
    alphas: np.ndarray  # alpha_1..alpha_T, float64

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        if a.ndim != 1 or a.size < 1:
            raise ValueError("schedule needs at least one timestep")
        if not ((a > 0) & (a <= 1)).all():
            raise ValueError("every alpha_t must lie in (0, 1]")
        object.__setattr__(self, "alphas", a)
        # index 0 holds the alpha_bar_0 = 1 convention
        object.__setattr__(self, "_abar", np.concatenate([[1.0], np.cumprod(a)]))

    @property
    def T(self) -> int:
        return self.alphas.size

    @property
    def betas(self) -> np.ndarray:
        return 1.0 - self.alphas

    @property
    def alpha_bars(self) -> np.ndarray:
        return self._abar[1:]

    def alpha(self, t: int) -> float:
        self.check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 0..{self.T}")
        return float(self._abar[t])

    def check_t(self, t) -> None:
        tt = np.asarray(t.cpu().numpy() if isinstance(t, Tensor) else t)
        if tt.size and (tt.min() < 1 or tt.max() > self.T):
            raise ValueError(f"timestep outside 1..{self.T}: {t}")


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 500
    beta_start: float = 1e-4
    beta_end: float = 0.02
    batch_size: int = 256
    learning_rate: float = 1e-4
    max_steps: int = 2000
    seed: int = 0
    checkpoint_every: int = 250
    plateau_window: int = 0  # 0 disables the plateau stop
    plateau_tol: float = 0.01

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError("need 0 < beta_start <= beta_end < 1")
        if self.batch_size < 1 or self.max_steps < 0 or self.learning_rate < 0:
            raise ValueError("invalid batch size, step budget or learning rate")


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule over T steps."""
    if T < 1 or not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"invalid schedule T={T}, beta=({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(1.0 - betas)


def _coef(values: np.ndarray, t, like: Tensor) -> Tensor:
    """Gather per-timestep coefficients and broadcast them against ``like``."""
    if isinstance(t, Tensor) and t.dim() > 0:
        c = torch.as_tensor(values[t.cpu().numpy()], dtype=like.dtype)
        return c.view(-1, *([1] * (like.dim() - 1)))
    return torch.tensor(float(values[int(t)]), dtype=like.dtype)


def forward_sample(x0: Tensor, t, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != instance shape {tuple(x0.shape)}")
    sched.check_t(t)
    abar = sched._abar
    return _coef(np.sqrt(abar), t, x0) * x0 + _coef(np.sqrt(1.0 - abar), t, x0) * eps


def posterior_variance(t: int, sched: NoiseSchedule) -> float:
    sched.check_t(t)
    abar_t, abar_prev = sched.alpha_bar(t), sched.alpha_bar(t - 1)
    a_t = sched.alpha(t)
    if a_t == 1.0:
        return 0.0
    return (1.0 - abar_prev) / (1.0 - abar_t) * (1.0 - a_t)


def posterior_mean(x_t: Tensor, eps_hat: Tensor, t, sched: NoiseSchedule) -> Tensor:
    """mu = (x_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)."""
    if x_t.shape != eps_hat.shape:
        raise ValueError("x_t and eps_hat shapes differ")
    sched.check_t(t)
    a = np.concatenate([[1.0], sched.alphas])
    abar = sched._abar
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.where(a < 1.0, (1.0 - a) / np.sqrt(np.maximum(1.0 - abar, 0.0)), 0.0)
    return (x_t - _coef(k, t, x_t) * eps_hat) / _coef(np.sqrt(a), t, x_t)


def _timesteps(t: int, n: int) -> Tensor:
    return torch.full((n,), int(t), dtype=torch.long)


@torch.no_grad()
def reverse_step(x_t: Tensor, t: int, net: Network, sched: NoiseSchedule, gen: torch.Generator) -> Tensor:
    """Draw x_{t-1} ~ N(mu_theta(x_t, t), sigma_t^2 I); no noise at t = 1."""
    sched.check_t(t)
    eps_hat = net(x_t, _timesteps(t, x_t.shape[0]))
    if eps_hat.shape != x_t.shape:
        raise ValueError(f"network output {tuple(eps_hat.shape)} != input {tuple(x_t.shape)}")
    mean = posterior_mean(x_t, eps_hat, t, sched)
    if t == 1:
        return mean
    sigma = math.sqrt(posterior_variance(t, sched))
    z = torch.randn(x_t.shape, generator=gen, dtype=x_t.dtype)
    return mean + sigma * z


@torch.no_grad()
def reconstruct(
    x0: Tensor,
    start_t: int,
    net: Network,
    sched: NoiseSchedule,
    gen: torch.Generator,
    eps: Tensor | None = None,
) -> Tensor:
    """Noise ``x0`` to ``start_t`` in closed form, then denoise back to t = 0."""
    sched.check_t(start_t)
    if eps is None:
        eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    x = forward_sample(x0, start_t, eps, sched)
    for t in range(start_t, 0, -1):
        x = reverse_step(x, t, net, sched, gen)
    return x


def diffusion_loss(x0: Tensor, net: Network, sched: NoiseSchedule, gen: torch.Generator) -> Tensor:
    """Mean absolute error between the injected noise and the predicted noise.

    One timestep t ~ U{1..T} and one Gaussian noise draw per instance.
    """
    n = x0.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    t = torch.randint(1, sched.T + 1, (n,), generator=gen)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    x_t = forward_sample(x0, t, eps, sched)
    return (eps - net(x_t, t)).abs().mean()


# --------------------------------------------------------------------------
# training


def _step_seeds(seed: int, step: int) -> tuple[int, int]:
    a, b = np.random.SeedSequence([seed, step]).generate_state(2)
    return int(a), int(b)


def _smoothed_stalled(losses: list[float], window: int, tol: float) -> bool:
    if window <= 0 or len(losses) < 2 * window:
        return False
    prev = float(np.mean(losses[-2 * window : -window]))
    last = float(np.mean(losses[-window:]))
    return (prev - last) / max(prev, 1e-12) < tol


def save_training_state(out_dir: Path, net, adam: ndk.AdamState, step: int, losses: list[float]) -> None:
    ndk.save_checkpoint(out_dir / "model.ckpt", ndk.module_tensors(net), {"step": step})
    ndk.save_checkpoint(out_dir / "adam.ckpt", adam.tensors(), adam.meta())
    with open(out_dir / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses, 1):
            w.writerow([i, repr(float(v))])
    (out_dir / "train_state.json").write_text(json.dumps({"step": step}))


def load_loss_history(path) -> list[float]:
    with open(path, newline="") as fh:
        return [float(r["loss"]) for r in csv.DictReader(fh)]


def train_diffusion(
    cube: np.ndarray,
    net,
    config: DiffusionConfig,
    out_dir=None,
    resume: bool = True,
) -> list[float]:
    """Adam on ``diffusion_loss`` over K x K patches centred on every pixel.

    ``cube`` is the normalized H x W x B array; every pixel (labeled or not)
    is a candidate patch centre. Per-step randomness is derived from
    (seed, step), so a run resumed from a checkpoint continues exactly as an
    uninterrupted one. Returns the per-step loss history.
    """
    sched = make_schedule(config.T, config.beta_start, config.beta_end)
    k = net.config.patch_size
    h, w, _ = cube.shape
    named = ndk.named_trainable(net)
    adam = ndk.AdamState.for_params(named, lr=config.learning_rate)
    losses: list[float] = []
    start = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "schedule.json").write_text(json.dumps(
            {"T": config.T, "beta_start": config.beta_start, "beta_end": config.beta_end}, indent=2))
        (out / "diffusion_config.json").write_text(json.dumps(asdict(config), indent=2))
        if is_dataclass(getattr(net, "config", None)):
            (out / "ssdn_config.json").write_text(json.dumps(asdict(net.config), indent=2))
        if resume and (out / "train_state.json").exists():
            tensors, _ = ndk.load_checkpoint(out / "model.ckpt")
            ndk.load_module_tensors(net, tensors)
            a_t, a_meta = ndk.load_checkpoint(out / "adam.ckpt")
            adam = ndk.AdamState.from_tensors(a_t, a_meta)
            adam.lr = config.learning_rate
            start = json.loads((out / "train_state.json").read_text())["step"]
            losses = load_loss_history(out / "loss.csv")[:start]
            log.info("resuming diffusion training at step %d", start)

    net.train()
    for step in range(start + 1, config.max_steps + 1):
        np_seed, torch_seed = _step_seeds(config.seed, step)
        idx = np.random.default_rng(np_seed).integers(0, h * w, size=config.batch_size)
        x0 = torch.from_numpy(extract_patches(cube, idx, k))
        loss = diffusion_loss(x0, net, sched, ndk.generator(torch_seed))
        if not torch.isfinite(loss):
            if out is not None and (out / "model.ckpt").exists():
                tensors, _ = ndk.load_checkpoint(out / "model.ckpt")
                ndk.load_module_tensors(net, tensors)
            raise DivergenceError(f"non-finite diffusion loss at step {step}; last checkpoint restored")
        ndk.zero_grad(named.values())
        ndk.backward(loss, named.values())
        ndk.adam_step(named, adam)
        losses.append(loss.item())
        if step % 100 == 0:
            log.info("diffusion step %d loss %.4f", step, float(np.mean(losses[-100:])))
        stop = _smoothed_stalled(losses, config.plateau_window, config.plateau_tol)
        if out is not None and (step % config.checkpoint_every == 0 or step == config.max_steps or stop):
            save_training_state(out, net, adam, step, losses)
        if stop:
            log.info("loss plateau at step %d, stopping", step)
            break
    if out is not None and not losses:
        save_training_state(out, net, adam, 0, losses)
    net.eval()
    return losses


def load_schedule(path) -> NoiseSchedule:
    d = json.loads(Path(path).read_text())
    return make_schedule(d["T"], d["beta_start"], d["beta_end"])
