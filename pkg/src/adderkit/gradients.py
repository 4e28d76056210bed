"""Hand-derived backward passes and a central-difference gradient checker.

Adder filters use two surrogate rules. The weight gradient is the exact
gradient of the squared-distance companion ``-1/2 * sum (X - F)**2``; the input
gradient uses a per-tap factor of either ``clip(F - X, -1, 1)`` or
``sign(F - X)``, the latter being the exact subgradient of the L1 forward.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .layers import CHUNK_ELEMS, BatchNormState, FilterBank, FilterKind
from .tensor import as_tensor4, col2im, float_dtype, im2col


class InputRule(str, Enum):
    HARDTANH_L2 = "hardtanh"
    SIGN = "sign"


@dataclass(frozen=True)
class GradMode:
    input_rule: InputRule = InputRule.SIGN
    weight_rule: str = "l2"

    def __post_init__(self):
        object.__setattr__(self, "input_rule", InputRule(self.input_rule))
        if self.weight_rule != "l2":
            raise ValueError("only the l2 weight rule is supported")


def _rows(x, f: FilterBank, gy):
    x = as_tensor4(x)
    gy = as_tensor4(gy)
    cols = im2col(x, f.geom)
    n, oh, ow, k = cols.shape
    expected = (n, f.c_out, oh, ow)
    if gy.shape != expected:
        raise ValueError(f"upstream gradient has shape {gy.shape}, forward produced {expected}")
    dt = float_dtype(x, f.weights, gy)
    rows = cols.reshape(-1, k).astype(dt, copy=False)
    g = gy.transpose(0, 2, 3, 1).reshape(-1, f.c_out).astype(dt, copy=False)
    w = f.weights.reshape(f.c_out, k).astype(dt, copy=False)
    return rows, g, w, dt


def adder_backward_weight(x, f: FilterBank, gy) -> np.ndarray:
    """``gF[t, k] = sum_rows gY[r, t] * (X[r, k] - F[t, k])`` including padded taps."""
    rows, g, w, dt = _rows(x, f, gy)
    g64 = g.astype(np.float64)
    gf = g64.T @ rows.astype(np.float64) - w.astype(np.float64) * g64.sum(axis=0)[:, None]
    return gf.reshape(f.weights.shape).astype(dt)


def adder_backward_input(x, f: FilterBank, gy, mode: GradMode | str = InputRule.SIGN) -> np.ndarray:
    if isinstance(mode, GradMode):
        rule = mode.input_rule
    else:
        rule = InputRule(mode)
    x = as_tensor4(x)
    rows, g, w, dt = _rows(x, f, gy)
    gp = np.empty_like(rows)
    k = rows.shape[1]
    step = max(1, CHUNK_ELEMS // max(1, f.c_out * k))
    for lo in range(0, rows.shape[0], step):
        d = w[None, :, :] - rows[lo:lo + step, None, :]
        if rule is InputRule.SIGN:
            np.sign(d, out=d)
        else:
            np.clip(d, -1.0, 1.0, out=d)
        gp[lo:lo + step] = np.einsum("rt,rtk->rk", g[lo:lo + step], d)
    n = x.shape[0]
    oh, ow = f.geom.output_size(x.shape[2], x.shape[3])
    return col2im(gp.reshape(n, oh, ow, k), x.shape, f.geom).astype(dt, copy=False)


def adder_backward_weight_true(x, f: FilterBank, gy) -> np.ndarray:
    """Exact (sub)gradient of the L1 forward w.r.t. the weights; for comparison only."""
    rows, g, w, dt = _rows(x, f, gy)
    gf = np.zeros(w.shape, np.float64)
    k = rows.shape[1]
    step = max(1, CHUNK_ELEMS // max(1, f.c_out * k))
    for lo in range(0, rows.shape[0], step):
        s = np.sign(rows[lo:lo + step, None, :] - w[None, :, :])
        gf += np.einsum("rt,rtk->tk", g[lo:lo + step], s)
    return gf.reshape(f.weights.shape).astype(dt)


def l2_companion_forward(x, f: FilterBank) -> np.ndarray:
    """``-1/2 * sum (X - F)**2`` over each window; the adder weight rule is its exact gradient."""
    x = as_tensor4(x)
    cols = im2col(x, f.geom)
    n, oh, ow, k = cols.shape
    dt = float_dtype(x, f.weights)
    rows = cols.reshape(-1, k).astype(np.float64)
    w = f.weights.reshape(f.c_out, k).astype(np.float64)
    sq = (rows ** 2).sum(1)[:, None] - 2 * rows @ w.T + (w ** 2).sum(1)[None, :]
    y = (-0.5 * sq).reshape(n, oh, ow, f.c_out).transpose(0, 3, 1, 2)
    if f.bias is not None:
        y = y + f.bias[None, :, None, None]
    return np.ascontiguousarray(y, dtype=dt)


def conv_backward(x, f: FilterBank, gy):
    """Returns ``(gX, gF, gbias)``; ``gbias`` is None when the bank has no bias."""
    x = as_tensor4(x)
    rows, g, w, dt = _rows(x, f, gy)
    g64 = g.astype(np.float64)
    gf = (g64.T @ rows.astype(np.float64)).reshape(f.weights.shape).astype(dt)
    gp = (g64 @ w.astype(np.float64)).astype(dt)
    n = x.shape[0]
    oh, ow = f.geom.output_size(x.shape[2], x.shape[3])
    gx = col2im(gp.reshape(n, oh, ow, -1), x.shape, f.geom)
    gb = g64.sum(axis=0).astype(dt) if f.bias is not None else None
    return gx, gf, gb


def filter_backward(x, f: FilterBank, gy, mode: GradMode | None = None):
    """``(gX, gF, gbias)`` for either filter kind."""
    if f.kind is FilterKind.CONV:
        return conv_backward(x, f, gy)
    gx = adder_backward_input(x, f, gy, mode or GradMode())
    gf = adder_backward_weight(x, f, gy)
    gb = None
    if f.bias is not None:
        gb = as_tensor4(gy).sum(axis=(0, 2, 3), dtype=np.float64).astype(gf.dtype)
    return gx, gf, gb


def bn_backward(x, bn: BatchNormState, gy, training: bool):
    """Returns ``(gX, ggamma, gbeta)``.

    Batch statistics are recomputed from ``x`` when they were used in the
    forward pass (training and not frozen); otherwise the running statistics
    are constants.
    """
    x = as_tensor4(x).astype(np.float64)
    gy = as_tensor4(gy)
    dt = float_dtype(gy, bn.gamma)
    g = gy.astype(np.float64)
    gamma = bn.gamma.astype(np.float64)[None, :, None, None]
    if training and not bn.frozen:
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        var = ((x - mean) ** 2).mean(axis=(0, 2, 3), keepdims=True)
    else:
        mean = bn.running_mean.astype(np.float64)[None, :, None, None]
        var = bn.running_var.astype(np.float64)[None, :, None, None]
    inv = 1.0 / np.sqrt(var + bn.eps)
    xhat = (x - mean) * inv
    gbeta = g.sum(axis=(0, 2, 3))
    ggamma = (g * xhat).sum(axis=(0, 2, 3))
    gxhat = g * gamma
    if training and not bn.frozen:
        gx = inv * (
            gxhat
            - gxhat.mean(axis=(0, 2, 3), keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        )
    else:
        gx = gxhat * inv
    return gx.astype(dt), ggamma.astype(dt), gbeta.astype(dt)


def relu_backward(x, gy) -> np.ndarray:
    x = as_tensor4(x)
    gy = as_tensor4(gy)
    return np.where(x > 0, gy, 0).astype(gy.dtype)


def upsample_backward(gy) -> np.ndarray:
    gy = as_tensor4(gy)
    n, c, h, w = gy.shape
    return gy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)).astype(gy.dtype)


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    params: list[ParamCheck] = field(default_factory=list)
    rel_tol: float = 1e-3

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    def to_csv(self, layer: str) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "parameter", "max_rel_err", "pass"])
        for p in self.params:
            writer.writerow([layer, p.name, f"{p.max_rel_err:.3e}", "pass" if p.passed else "fail"])
        return buf.getvalue()


def relative_error(analytic, numeric, abs_floor: float = 1e-5) -> float:
    a = np.asarray(analytic, np.float64)
    n = np.asarray(numeric, np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), abs_floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_gradient(forward: Callable, params: dict, name: str, gy, step: float = 1e-3):
    """Central differences of ``sum(gy * forward(**params))`` w.r.t. ``params[name]``."""
    base = params[name]
    grad = np.zeros(base.shape, np.float64)
    for idx in np.ndindex(*base.shape):
        orig = base[idx]
        base[idx] = orig + step
        up = np.sum(gy * forward(**params), dtype=np.float64)
        base[idx] = orig - step
        down = np.sum(gy * forward(**params), dtype=np.float64)
        base[idx] = orig
        grad[idx] = (up - down) / (2 * step)
    return grad


def gradcheck(
    forward: Callable,
    params: dict,
    analytic: Callable,
    rel_tol: float = 1e-3,
    abs_floor: float = 1e-5,
    step: float = 1e-3,
    check: list[str] | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare hand-written gradients with central differences.

    ``forward(**params)`` returns an array; ``analytic(gy, **params)`` returns
    a dict of gradients of ``sum(gy * forward)``. Every parameter is promoted
    to float64 first. Mismatches are reported, never raised.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    y = np.asarray(forward(**params))
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("forward produced non-finite values")
    gy = np.random.default_rng(seed).normal(size=y.shape)
    grads = analytic(gy, **params)
    report = GradCheckReport(rel_tol=rel_tol)
    for name in check or list(grads):
        num = numeric_gradient(forward, params, name, gy, step)
        err = relative_error(grads[name], num, abs_floor)
        report.params.append(ParamCheck(name, err, err <= rel_tol))
    return report


def kink_free_inputs(rng, x_shape, w_shape, margin: float = 0.01, span: int = 50):
    """Random (X, F) on interleaved lattices so every |X - F| and |F| is >= ``margin``.

    X takes odd multiples of ``margin`` and F nonzero even multiples, so a
    central difference with step below ``margin`` never crosses a kink of
    the adder forward (zero padding included).
    """
    rng = np.random.default_rng(rng)
    x = margin * (2 * rng.integers(-span, span, size=x_shape) + 1)
    k = rng.integers(1, span + 1, size=w_shape) * rng.choice([-1, 1], size=w_shape)
    return x.astype(np.float64), (2 * margin * k).astype(np.float64)
