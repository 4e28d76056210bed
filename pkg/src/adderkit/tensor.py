"""Dense rank-4 tensors (N, C, H, W) and the window arithmetic shared by conv and adder layers.

Tensors are plain ``numpy`` float32 arrays; this module only adds the
geometry bookkeeping, patch extraction, statistics and a small binary format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DTYPE = np.float32
MAGIC = b"ADT4"


@dataclass(frozen=True)
class ConvGeometry:
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        kh, kw = self.kernel
        if kh < 1 or kw < 1:
            raise ValueError(f"kernel must be positive, got {self.kernel}")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValueError(
                f"geometry {self} gives empty output for {h}x{w} input"
            )
        return oh, ow


def float_dtype(*arrays) -> np.dtype:
    """float64 if any operand is float64 (gradient checking), else float32."""
    if any(np.asarray(a).dtype == np.float64 for a in arrays if a is not None):
        return np.dtype(np.float64)
    return np.dtype(DTYPE)


def as_tensor4(x) -> np.ndarray:
    x = np.asarray(x)
    x = x.astype(float_dtype(x), copy=False)
    if x.ndim != 4:
        raise ValueError(f"expected a rank-4 (N, C, H, W) tensor, got shape {x.shape}")
    return x


def pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def extract_patch(x, sample: int, out_y: int, out_x: int, geom: ConvGeometry) -> np.ndarray:
    """Receptive field of one output position as a flat vector.

    Ordering is (i, j, k): kernel row slowest, then kernel column, then input
    channel fastest. Taps falling in the zero padding are returned as 0.
    """
    x = as_tensor4(x)
    n, c, h, w = x.shape
    oh, ow = geom.output_size(h, w)
    for name, idx, bound in (("sample", sample, n), ("out_y", out_y, oh), ("out_x", out_x, ow)):
        if not 0 <= idx < bound:
            raise IndexError(f"{name}={idx} out of range [0, {bound})")
    kh, kw = geom.kernel
    out = np.zeros((kh, kw, c), dtype=DTYPE)
    y0 = out_y * geom.stride - geom.padding
    x0 = out_x * geom.stride - geom.padding
    for i in range(kh):
        for j in range(kw):
            yy, xx = y0 + i, x0 + j
            if 0 <= yy < h and 0 <= xx < w:
                out[i, j, :] = x[sample, :, yy, xx]
    return out.reshape(-1)


def im2col(x: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """All patches at once, shape (N, OH, OW, C*kh*kw) in (k, i, j) order.

    The (k, i, j) order matches a (c_out, c_in, kh, kw) weight array flattened
    per output channel, which is what the layer kernels consume.
    """
    n, c, h, w = x.shape
    kh, kw = geom.kernel
    s = geom.stride
    oh, ow = geom.output_size(h, w)
    xp = pad(x, geom.padding)
    cols = np.empty((n, oh, ow, c, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            win = xp[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s]
            cols[..., i, j] = win.transpose(0, 2, 3, 1)
    return cols.reshape(n, oh, ow, c * kh * kw)


def col2im(cols: np.ndarray, x_shape, geom: ConvGeometry) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to the input.

    Contributions landing in the padding are dropped.
    """
    n, c, h, w = x_shape
    kh, kw = geom.kernel
    s, p = geom.stride, geom.padding
    oh, ow = geom.output_size(h, w)
    cols = cols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += (
                cols[..., i, j].transpose(0, 3, 1, 2)
            )
    if p:
        out = out[:, :, p:-p, p:-p]
    return np.ascontiguousarray(out)


def tensor_stats(x, per_channel: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Mean and biased variance, per channel or over the whole tensor.

    Accumulates in float64.
    """
    x = as_tensor4(x)
    if x.size == 0:
        raise ValueError("tensor_stats of an empty tensor")
    axes = (0, 2, 3) if per_channel else None
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=axes)
    if per_channel:
        var = ((x64 - mean[None, :, None, None]) ** 2).mean(axis=axes)
    else:
        var = ((x64 - mean) ** 2).mean()
    return mean, var


def save_tensor(path, x) -> None:
    """Write ``x`` as magic + 4 little-endian u32 dims + little-endian f32 data."""
    x = as_tensor4(x)
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(x))


def tensor_to_bytes(x) -> bytes:
    x = as_tensor4(x)
    header = MAGIC + struct.pack("<4I", *x.shape)
    return header + np.ascontiguousarray(x, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise ValueError("not a tensor blob (bad magic)")
    shape = struct.unpack("<4I", buf[4:20])
    count = int(np.prod(shape))
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=20)
    if data.size != count:
        raise ValueError(f"truncated tensor blob: expected {count} values")
    return data.astype(DTYPE).reshape(shape)


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def to_csv(x, path=None) -> str:
    """Debug export: one row per element, ``n,c,h,w,value``."""
    x = as_tensor4(x)
    lines = ["n,c,h,w,value"]
    for idx in np.ndindex(*x.shape):
        lines.append(",".join(map(str, idx)) + f",{float(x[idx])!r}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text
