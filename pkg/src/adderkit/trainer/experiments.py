"""Multi-seed studies built on the two toy tasks, plus the BN batch-statistic table."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import classify, detect

SEEDS = (0, 1, 2, 3, 4)


def bn_stat_variance_experiment(batch_sizes, data=None, n_batches: int = 2000, seed: int = 0):
    """Std across batches of per-batch channel means, one row per batch size.

    ``data`` is (samples, channels); by default 4096 i.i.d. standard normal
    rows with 8 channels. Batches are drawn without replacement within a
    batch. Returns ``[(batch_size, std averaged over channels), ...]``.
    """
    rng = np.random.default_rng(seed)
    if data is None:
        data = rng.normal(size=(4096, 8))
    data = np.asarray(data, np.float64)
    if data.ndim != 2:
        raise ValueError("data must be (samples, channels)")
    rows = []
    for bs in batch_sizes:
        if not 1 <= bs <= len(data):
            raise ValueError(f"batch size {bs} outside [1, {len(data)}]")
        means = np.empty((n_batches, data.shape[1]))
        for i in range(n_batches):
            idx = rng.choice(len(data), bs, replace=False)
            means[i] = data[idx].mean(axis=0)
        rows.append((bs, float(means.std(axis=0).mean())))
    return rows


@dataclass
class ClassifierStudy:
    """Per (arch, policy): lists over seeds of final loss, initial loss, sparsity and BN-mean TV."""

    runs: dict = field(default_factory=dict)

    def mean(self, arch, policy, key) -> float:
        return float(np.mean([r[key] for r in self.runs[(arch, policy)]]))

    def gap(self, arch) -> float:
        return self.mean(arch, "frozen", "final_loss") - self.mean(arch, "unfrozen", "final_loss")

    def table(self) -> str:
        lines = [f"{'arch':6} {'policy':9} {'initial':>8} {'final':>8} {'sparsity':>9} {'bn_mean_tv':>11}"]
        for (arch, policy) in sorted(self.runs):
            lines.append(
                f"{arch:6} {policy:9} {self.mean(arch, policy, 'initial_loss'):8.4f} "
                f"{self.mean(arch, policy, 'final_loss'):8.4f} {self.mean(arch, policy, 'sparsity'):9.4f} "
                f"{self.mean(arch, policy, 'bn_tv'):11.4f}"
            )
        return "\n".join(lines)


def classifier_study(seeds=SEEDS, archs=("conv", "adder"), policies=classify.BN_POLICIES, batch_size=32):
    study = ClassifierStudy()
    for arch in archs:
        for policy in policies:
            runs = study.runs.setdefault((arch, policy), [])
            for seed in seeds:
                rec = classify.train_toy_classifier(arch, policy, batch_size, seed=seed)
                runs.append({
                    "initial_loss": rec.loss[0],
                    "final_loss": rec.final_loss(),
                    "sparsity": rec.metrics["last_block_sparsity"],
                    "bn_tv": rec.bn_mean_total_variation(),
                })
    return study


def neck_study(necks=("fpn", "rpafpn"), seeds=SEEDS, backbone_kind="adder", cfg=None):
    """Held-out F1 per neck kind, one entry per seed."""
    return {
        neck: [detect.train_toy_detector(neck, backbone_kind, cfg, seed=s).f1 for s in seeds]
        for neck in necks
    }
