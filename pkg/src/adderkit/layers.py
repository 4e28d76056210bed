"""Forward kernels: adder filters, convolution, batch norm, and the resize ops."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .tensor import DTYPE, ConvGeometry, as_tensor4, float_dtype, im2col

# rows of patches processed at once by the adder kernels; bounds the
# (rows, c_out, K) temporary
CHUNK_ELEMS = 1 << 22


class FilterKind(str, Enum):
    ADDER = "adder"
    CONV = "conv"


@dataclass
class FilterBank:
    weights: np.ndarray  # (c_out, c_in, kh, kw)
    kind: FilterKind
    geom: ConvGeometry
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=float_dtype(self.weights))
        if self.weights.ndim != 4:
            raise ValueError(f"weights must be (c_out, c_in, kh, kw), got {self.weights.shape}")
        if tuple(self.weights.shape[2:]) != tuple(self.geom.kernel):
            raise ValueError(
                f"weights kernel {self.weights.shape[2:]} != geometry kernel {self.geom.kernel}"
            )
        object.__setattr__(self, "kind", FilterKind(self.kind))
        if self.bias is not None:
            self.bias = np.ascontiguousarray(self.bias, dtype=float_dtype(self.bias)).reshape(-1)
            if self.bias.shape[0] != self.c_out:
                raise ValueError(f"bias has {self.bias.shape[0]} entries, expected {self.c_out}")

    def __setattr__(self, name, value):
        if name == "kind" and "kind" in self.__dict__:
            raise AttributeError("FilterBank.kind is immutable")
        super().__setattr__(name, value)

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def init(cls, kind, c_in, c_out, kernel=3, stride=1, padding=None, bias=False, rng=None):
        """Gaussian init: He scaling for conv, unit variance for adder filters.

        Adder outputs only become channel-selective when the weights span the
        range of the incoming activations; with He-scaled weights below most
        post-ReLU inputs every channel collapses to ``-sum(x) + const``.
        """
        rng = np.random.default_rng(rng)
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if padding is None:
            padding = kh // 2
        std = 1.0 if FilterKind(kind) is FilterKind.ADDER else np.sqrt(2.0 / (kh * kw * c_in))
        w = rng.normal(0.0, std, size=(c_out, c_in, kh, kw)).astype(DTYPE)
        b = np.zeros(c_out, DTYPE) if bias else None
        return cls(w, kind, ConvGeometry((kh, kw), stride, padding), b)


def _check_input(x, f: FilterBank):
    x = as_tensor4(x)
    if x.shape[1] != f.c_in:
        raise ValueError(
            f"input has {x.shape[1]} channels but the filter bank expects {f.c_in}"
        )
    return x


def adder_forward(x, f: FilterBank) -> np.ndarray:
    """Negated L1 distance between every input patch and every filter.

    ``Y[n, t, m, q] = -sum_{k,i,j} |Xpad[n, k, m*s+i, q*s+j] - F[t, k, i, j]|``;
    padded taps are zeros and still contribute ``|F|``.
    """
    x = _check_input(x, f)
    n = x.shape[0]
    cols = im2col(x, f.geom)
    _, oh, ow, k = cols.shape
    rows = cols.reshape(-1, k)
    dt = float_dtype(x, f.weights)
    rows = rows.astype(dt, copy=False)
    w = f.weights.reshape(f.c_out, k).astype(dt, copy=False)
    out = np.empty((rows.shape[0], f.c_out), dtype=dt)
    step = max(1, CHUNK_ELEMS // max(1, f.c_out * k))
    for lo in range(0, rows.shape[0], step):
        d = np.abs(rows[lo:lo + step, None, :] - w[None, :, :])
        out[lo:lo + step] = -d.sum(axis=2, dtype=np.float64)
    y = out.reshape(n, oh, ow, f.c_out).transpose(0, 3, 1, 2)
    if f.bias is not None:
        y = y + f.bias[None, :, None, None]
    return np.ascontiguousarray(y, dtype=dt)


def conv_forward(x, f: FilterBank) -> np.ndarray:
    """Cross-correlation with zero padding."""
    x = _check_input(x, f)
    n = x.shape[0]
    cols = im2col(x, f.geom)
    _, oh, ow, k = cols.shape
    w = f.weights.reshape(f.c_out, k)
    y = cols.reshape(-1, k).astype(np.float64) @ w.T.astype(np.float64)
    y = y.reshape(n, oh, ow, f.c_out).transpose(0, 3, 1, 2)
    if f.bias is not None:
        y = y + f.bias[None, :, None, None]
    return np.ascontiguousarray(y, dtype=float_dtype(x, f.weights))


def filter_forward(x, f: FilterBank) -> np.ndarray:
    if f.kind is FilterKind.ADDER:
        return adder_forward(x, f)
    return conv_forward(x, f)


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    frozen: bool = False

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5, frozen: bool = False):
        return cls(
            gamma=np.ones(channels, DTYPE),
            beta=np.zeros(channels, DTYPE),
            running_mean=np.zeros(channels, DTYPE),
            running_var=np.ones(channels, DTYPE),
            momentum=momentum,
            eps=eps,
            frozen=frozen,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm_forward(x, bn: BatchNormState, training: bool) -> np.ndarray:
    """Per-channel normalization followed by the affine map.

    In training mode with ``bn.frozen`` false, the batch statistics are used
    and the running statistics follow an EMA with ``bn.momentum``. Otherwise
    the stored running statistics are used and never touched.
    """
    x = as_tensor4(x)
    if x.shape[1] != bn.channels:
        raise ValueError(f"input has {x.shape[1]} channels, batch norm has {bn.channels}")
    if training and not bn.frozen:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise ValueError("batch statistics need at least 2 values per channel")
        x64 = x.astype(np.float64)
        mean = x64.mean(axis=(0, 2, 3))
        var = ((x64 - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
        m = bn.momentum
        bn.running_mean = ((1 - m) * bn.running_mean + m * mean).astype(DTYPE)
        bn.running_var = ((1 - m) * bn.running_var + m * var).astype(DTYPE)
    else:
        mean = bn.running_mean.astype(np.float64)
        var = bn.running_var.astype(np.float64)
        x64 = x.astype(np.float64)
    inv = 1.0 / np.sqrt(var + bn.eps)
    xhat = (x64 - mean[None, :, None, None]) * inv[None, :, None, None]
    y = xhat * bn.gamma[None, :, None, None] + bn.beta[None, :, None, None]
    return y.astype(float_dtype(x, bn.gamma, bn.beta))


def relu(x) -> np.ndarray:
    x = as_tensor4(x)
    return np.maximum(x, 0).astype(x.dtype)


def upsample_nearest_2x(x) -> np.ndarray:
    x = as_tensor4(x)
    return np.ascontiguousarray(x.repeat(2, axis=2).repeat(2, axis=3))


def downsample(x, f: FilterBank) -> np.ndarray:
    """Stride-2 filtered reduction; odd sizes round down (with padding 1: ceil of half)."""
    if f.geom.stride != 2:
        raise ValueError(f"downsample needs a stride-2 filter bank, got stride {f.geom.stride}")
    return filter_forward(x, f)


def sparsity(x, threshold: float = 0.0) -> float:
    """Fraction of elements with ``|x| <= threshold``."""
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("sparsity of an empty tensor")
    return float(np.count_nonzero(np.abs(x) <= threshold)) / x.size
