from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np


@dataclass
class TrainRecord:
    """Append-only per-step log: loss, LR, BN running stats and weight norms."""

    steps: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    bn_mean: dict = field(default_factory=dict)  # layer -> list of arrays
    bn_var: dict = field(default_factory=dict)
    weight_l2: dict = field(default_factory=dict)  # layer -> list of floats
    metrics: dict = field(default_factory=dict)

    def append(self, step: int, loss: float, lr: float, model=None):
        if self.steps and step <= self.steps[-1]:
            raise ValueError(f"step {step} does not follow {self.steps[-1]}")
        self.steps.append(step)
        self.loss.append(float(loss))
        self.lr.append(float(lr))
        if model is None:
            return
        for name, bn in model.batchnorms():
            self.bn_mean.setdefault(name, []).append(bn.running_mean.copy())
            self.bn_var.setdefault(name, []).append(bn.running_var.copy())
        for name, p in model.named_params():
            if name.endswith(".weight"):
                norm = float(np.sqrt(np.sum(np.square(p.value, dtype=np.float64))))
                self.weight_l2.setdefault(name[: -len(".weight")], []).append(norm)

    def final_loss(self, window: int = 10) -> float:
        return float(np.mean(self.loss[-window:]))

    def bn_mean_total_variation(self, prefix: str = "") -> float:
        """Sum over layers and steps of the L1 change in running means."""
        tv = 0.0
        for name, traj in self.bn_mean.items():
            if name.startswith(prefix) and len(traj) > 1:
                arr = np.asarray(traj, np.float64)
                tv += float(np.abs(np.diff(arr, axis=0)).sum())
        return tv

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "lr", "layer", "bn_mean_norm", "bn_var_norm", "weight_l2"])
        layers = sorted(set(self.bn_mean) | set(self.weight_l2))
        for i, step in enumerate(self.steps):
            base = [step, f"{self.loss[i]:.6g}", f"{self.lr[i]:.6g}"]
            if not layers:
                w.writerow(base + ["", "", "", ""])
            for layer in layers:
                m = self.bn_mean.get(layer)
                v = self.bn_var.get(layer)
                wl = self.weight_l2.get(layer)
                w.writerow(base + [
                    layer,
                    f"{np.linalg.norm(m[i]):.6g}" if m else "",
                    f"{np.linalg.norm(v[i]):.6g}" if v else "",
                    f"{wl[i]:.6g}" if wl else "",
                ])
        return buf.getvalue()


def parse_config(text: str) -> dict:
    """Plain ``key=value`` lines; ``#`` comments; values parsed as int, float, bool or str."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        out[key.strip()] = _coerce(value.strip())
    return out


def _coerce(value: str):
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value
