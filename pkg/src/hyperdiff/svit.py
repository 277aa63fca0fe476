"""Spectral vision transformer over per-pixel feature patches.

Each pixel is classified from the K_c x K_c window of feature vectors around
it; every window position is one token carrying a learned position embedding.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from . import ndk
from .hsio import LabelMap, extract_patches

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SvitConfig:
    n_classes: int
    context: int = 8
    model_dim: int = 64
    heads: int = 4
    blocks: int = 5
    mlp_dim: int = 128
    dropout: float = 0.1
    feature_source: str = "diffusion"
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.context < 1 or self.model_dim < 1 or self.blocks < 1:
            raise ValueError("context, model_dim and blocks must be positive")
        if self.model_dim % self.heads:
            raise ValueError(f"heads={self.heads} does not divide model_dim={self.model_dim}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.feature_source not in ("raw", "diffusion"):
            raise ValueError(f"unknown feature_source {self.feature_source!r}")

    @property
    def tokens(self) -> int:
        return self.context**2


class _MLP(nn.Module):
    def __init__(self, d_in, d_hidden, d_out, p, gen):
        super().__init__()
        self.fc1 = ndk.Linear(d_in, d_hidden, gen=gen)
        self.fc2 = ndk.Linear(d_hidden, d_out, gen=gen)
        self.p = p

    def forward(self, x, gen=None):
        h = ndk.dropout(ndk.relu(self.fc1(x)), self.p, self.training, gen)
        return self.fc2(h)


class _TransformerBlock(nn.Module):
    def __init__(self, dim, heads, mlp_dim, p, gen):
        super().__init__()
        self.norm1 = ndk.LayerNorm(dim)
        self.attn = ndk.MultiHeadAttention(dim, heads, gen=gen)
        self.norm2 = ndk.LayerNorm(dim)
        self.mlp = _MLP(dim, mlp_dim, dim, p, gen)

    def forward(self, x, gen=None):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x), gen)


class SvitModel(nn.Module):
    def __init__(self, config: SvitConfig, d_in: int):
        super().__init__()
        self.config, self.d_in = config, d_in
        gen = ndk.generator(config.seed)
        self.embed = ndk.Linear(d_in, config.model_dim, gen=gen)
        self.pos = ndk.Parameter(
            0.02 * torch.randn((config.tokens, config.model_dim), generator=gen)
        )
        self.blocks = nn.ModuleList(
            _TransformerBlock(config.model_dim, config.heads, config.mlp_dim, config.dropout, gen)
            for _ in range(config.blocks)
        )
        self.norm = ndk.LayerNorm(config.model_dim)
        self.head = _MLP(config.model_dim, config.mlp_dim, config.n_classes, config.dropout, gen)
        self.eval()

    def forward(self, patches: Tensor, gen: torch.Generator | None = None) -> Tensor:
        """N x K_c x K_c x D feature patches -> N x C logits."""
        n = patches.shape[0]
        c = self.config
        if patches.shape[1:] != (c.context, c.context, self.d_in):
            raise ValueError(
                f"expected N x {c.context} x {c.context} x {self.d_in}, got {tuple(patches.shape)}"
            )
        x = self.embed(patches.reshape(n, c.tokens, self.d_in)) + self.pos
        for block in self.blocks:
            x = block(x, gen)
        return self.head(ndk.mean_pool(self.norm(x), dim=1), gen)


def build_svit(config: SvitConfig, d_in: int) -> SvitModel:
    return SvitModel(config, d_in)


def _patches(features: np.ndarray, idx: np.ndarray, k: int) -> Tensor:
    return torch.from_numpy(np.ascontiguousarray(extract_patches(features, idx, k), dtype=np.float32))


@torch.no_grad()
def predict_pixels(model: SvitModel, features: np.ndarray, idx: np.ndarray, batch: int = 256) -> np.ndarray:
    """1-based class predictions for the given flat pixel indices."""
    if features.shape[2] != model.d_in:
        raise ValueError(f"features have {features.shape[2]} dims, model expects {model.d_in}")
    model.eval()
    out = []
    for i in range(0, len(idx), batch):
        logits = model(_patches(features, idx[i : i + batch], model.config.context))
        out.append(logits.argmax(dim=1).numpy() + 1)
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def predict_map(model: SvitModel, features: np.ndarray) -> LabelMap:
    """Dense prediction over every pixel, labeled or not."""
    h, w = features.shape[:2]
    pred = predict_pixels(model, features, np.arange(h * w))
    return LabelMap(pred.reshape(h, w).astype(np.int64))


def train_classifier(
    features: np.ndarray,
    labels: LabelMap,
    train_idx: np.ndarray,
    test_idx: np.ndarray,
    config: SvitConfig,
) -> tuple[SvitModel, list[tuple[int, float, float]]]:
    """Cross-entropy training on the centre-pixel label of each feature window.

    Returns the model and a per-epoch (epoch, train_acc, test_acc) history.
    """
    flat = labels.labels.ravel()
    y_train = flat[train_idx]
    if (y_train <= 0).any():
        raise ValueError("training split contains unlabeled pixels")
    missing = sorted(set(range(1, config.n_classes + 1)) - set(y_train.tolist()))
    if missing:
        raise ValueError(f"classes {missing} absent from the training split")
    model = build_svit(config, features.shape[2])
    named = ndk.named_trainable(model)
    adam = ndk.AdamState.for_params(named, lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    drop_gen = ndk.generator(config.seed + 1)
    targets = torch.from_numpy(y_train - 1).long()
    history = []
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = rng.permutation(len(train_idx))
        for i in range(0, len(order), config.batch_size):
            sel = order[i : i + config.batch_size]
            logits = model(_patches(features, train_idx[sel], config.context), drop_gen)
            loss = ndk.cross_entropy(logits, targets[sel])
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite classifier loss in epoch {epoch}")
            ndk.zero_grad(named.values())
            ndk.backward(loss, named.values())
            ndk.adam_step(named, adam)
        train_acc = float((predict_pixels(model, features, train_idx) == y_train).mean())
        test_acc = (
            float((predict_pixels(model, features, test_idx) == flat[test_idx]).mean())
            if len(test_idx) else float("nan")
        )
        history.append((epoch, train_acc, test_acc))
        log.info("epoch %d train_acc %.4f test_acc %.4f", epoch, train_acc, test_acc)
    model.eval()
    return model, history


def save_svit(model: SvitModel, out_dir, history=None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = asdict(model.config) | {"d_in": model.d_in}
    (out / "svit_config.json").write_text(json.dumps(cfg, indent=2))
    ndk.save_checkpoint(out / "model.ckpt", ndk.module_tensors(model))
    if history is not None:
        with open(out / "history.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_acc", "test_acc"])
            w.writerows(history)


def load_svit(out_dir) -> SvitModel:
    out = Path(out_dir)
    cfg = json.loads((out / "svit_config.json").read_text())
    d_in = cfg.pop("d_in")
    model = SvitModel(SvitConfig(**cfg), d_in)
    tensors, _ = ndk.load_checkpoint(out / "model.ckpt")
    ndk.load_module_tensors(model, tensors)
    model.eval()
    return model
