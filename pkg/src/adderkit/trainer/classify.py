"""Toy classifier twins and the stale-statistics fine-tuning experiment.

Both twins share one layout: a conv stem, three filter blocks (adder or
conv), global pooling and a 1x1 conv head with bias. Pretraining on task A
produces a checkpoint; fine-tuning re-initializes the head and trains on
task B with the backbone BN either frozen or unfrozen.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..checkpoint import load_checkpoint, load_state_dict, save_checkpoint, state_dict
from ..layers import FilterKind
from ..nn import Filter, GlobalAvgPool, Sequential, filter_bn_relu
from .data import ClusterTask
from .optim import SGD, OptimConfig
from .record import TrainRecord

TASK_A_SEED = 1000
TASK_B_SEED = 2000
WIDTHS = (8, 16, 16, 32)
STALE_SCALE = 0.5
BN_POLICIES = ("frozen", "unfrozen")


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient w.r.t. ``logits`` of shape (N, K)."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n


class ToyClassifier(Sequential):
    def __init__(self, arch: str, classes: int, rng, channels: int = 3):
        kind = FilterKind(arch)
        c0, c1, c2, c3 = WIDTHS
        super().__init__(
            filter_bn_relu(FilterKind.CONV, channels, c0, rng=rng),
            filter_bn_relu(kind, c0, c1, stride=2, rng=rng),
            filter_bn_relu(kind, c1, c2, rng=rng),
            filter_bn_relu(kind, c2, c3, stride=2, rng=rng),
            GlobalAvgPool(),
            Filter.create(FilterKind.CONV, c3, classes, kernel=1, bias=True, rng=rng),
            names=["stem", "block1", "block2", "block3", "pool", "head"],
        )
        self.arch = kind

    @property
    def head(self) -> Filter:
        return self.layers[-1]

    def last_block(self) -> Sequential:
        return self.layers[3]

    def reset_head(self, classes: int, rng):
        self.layers[-1] = Filter.create(FilterKind.CONV, WIDTHS[-1], classes, kernel=1, bias=True, rng=rng)

    def backbone_bns(self):
        return [bn for name, bn in self.batchnorms() if not name.startswith("head")]

    def logits(self, x, training=True):
        return self.forward(x, training)[:, :, 0, 0]


def _train(model, task, cfg: OptimConfig, batch_size, rng, record=None):
    opt = SGD(model.named_params(), cfg)
    record = record if record is not None else TrainRecord()
    for step in range(cfg.total_steps):
        x, y = task.sample(batch_size, rng)
        opt.zero_grad()
        loss, g = softmax_cross_entropy(model.logits(x, True), y)
        model.backward(g[:, :, None, None].astype(np.float32))
        record.append(step, loss, cfg.lr_at(step), model)
        opt.step()
    return record


def pretrain_config() -> OptimConfig:
    return OptimConfig(base_lr=0.05, total_steps=300)


def finetune_config() -> OptimConfig:
    return OptimConfig(base_lr=0.02, total_steps=150)


def checkpoint_dir() -> Path:
    return Path(__file__).resolve().parent.parent / "data" / "checkpoints"


def checkpoint_path(arch: str) -> Path:
    return checkpoint_dir() / f"toy_{FilterKind(arch).value}.ckpt"


def pretrain(arch: str, seed: int = 0, cfg: OptimConfig | None = None, batch_size: int = 32):
    """Train a twin on task A and return ``(model, record)``."""
    rng = np.random.default_rng(seed)
    task = ClusterTask.make(TASK_A_SEED)
    model = ToyClassifier(arch, task.classes, rng)
    rec = _train(model, task, cfg or pretrain_config(), batch_size, rng)
    return model, rec


def write_checkpoints(out_dir=None):
    out = Path(out_dir) if out_dir else checkpoint_dir()
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for arch in ("conv", "adder"):
        model, rec = pretrain(arch)
        path = out / f"toy_{arch}.ckpt"
        save_checkpoint(path, state_dict(model))
        paths.append((path, rec.final_loss()))
    return paths


def load_pretrained(arch: str, checkpoint=None, rng=None) -> ToyClassifier:
    path = Path(checkpoint) if checkpoint else checkpoint_path(arch)
    if not path.exists():
        raise FileNotFoundError(f"pretrained checkpoint not found: {path}")
    model = ToyClassifier(arch, ClusterTask.make(TASK_A_SEED).classes, rng or np.random.default_rng(0))
    load_state_dict(model, load_checkpoint(path))
    return model


def inject_stale_stats(model: ToyClassifier, seed: int, scale: float = STALE_SCALE):
    """Multiply every backbone running mean and variance by fixed log-normal noise."""
    rng = np.random.default_rng(seed)
    for bn in model.backbone_bns():
        bn.running_mean = (bn.running_mean * np.exp(scale * rng.normal(size=bn.channels))).astype(np.float32)
        bn.running_var = (bn.running_var * np.exp(scale * rng.normal(size=bn.channels))).astype(np.float32)


def train_toy_classifier(
    arch: str,
    bn_policy: str,
    batch_size: int = 32,
    cfg: OptimConfig | None = None,
    seed: int = 0,
    checkpoint=None,
    stale_scale: float = STALE_SCALE,
) -> TrainRecord:
    """Fine-tune a pretrained twin on task B.

    The checkpoint's running statistics are perturbed first (the same noise
    for both policies). ``frozen`` evaluates backbone BN with those stored
    statistics throughout; ``unfrozen`` uses batch statistics and updates
    the running estimates. Affine parameters train in both cases.
    """
    if bn_policy not in BN_POLICIES:
        raise ValueError(f"bn_policy must be one of {BN_POLICIES}, got {bn_policy!r}")
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    rng = np.random.default_rng(seed)
    model = load_pretrained(arch, checkpoint, rng)
    task = ClusterTask.make(TASK_B_SEED)
    model.reset_head(task.classes, rng)
    inject_stale_stats(model, seed + 1, stale_scale)
    for bn in model.backbone_bns():
        bn.frozen = bn_policy == "frozen"
    rec = _train(model, task, cfg or finetune_config(), batch_size, rng)
    x, _ = task.sample(64, np.random.default_rng(seed + 2))
    rec.metrics["last_block_sparsity"] = last_block_sparsity(model, x)
    rec.model = model
    return rec


def last_block_sparsity(model: ToyClassifier, x) -> float:
    """Fraction of exact zeros after the last block's ReLU, in eval mode."""
    h = x
    for layer in model.layers[:4]:
        h = layer.forward(h, training=False)
    return float(np.mean(h == 0))
