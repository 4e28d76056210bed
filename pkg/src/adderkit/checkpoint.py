"""Weight checkpoints: a text index followed by tensor blobs.

Layout::

    ADDERKIT-CKPT 1
    <name> <shape as d0,d1,..> <offset> <nbytes>
    ...
    <blank line>
    <blob><blob>...

Each blob uses the tensor binary format (magic, four u32 dims, f32 data);
arrays of rank below 4 are stored with leading unit dims and restored to the
indexed shape. Offsets count from the first byte after the blank line.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .tensor import tensor_from_bytes, tensor_to_bytes

HEADER = "ADDERKIT-CKPT 1"


def save_checkpoint(path, tensors: dict) -> None:
    index, blobs, offset = [HEADER], [], 0
    for name, arr in tensors.items():
        if any(ch.isspace() for ch in name):
            raise ValueError(f"parameter name {name!r} contains whitespace")
        arr = np.asarray(arr, np.float32)
        if arr.ndim > 4:
            raise ValueError(f"{name}: rank {arr.ndim} > 4")
        blob = tensor_to_bytes(arr.reshape((1,) * (4 - arr.ndim) + arr.shape))
        shape = ",".join(map(str, arr.shape)) or "-"
        index.append(f"{name} {shape} {offset} {len(blob)}")
        blobs.append(blob)
        offset += len(blob)
    with open(path, "wb") as fh:
        fh.write(("\n".join(index) + "\n\n").encode("ascii"))
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n\n")
    if not sep:
        raise ValueError(f"{path}: missing index terminator")
    lines = head.decode("ascii").split("\n")
    if lines[0] != HEADER:
        raise ValueError(f"{path}: not a checkpoint (header {lines[0]!r})")
    out = {}
    for line in lines[1:]:
        name, shape, offset, nbytes = line.split(" ")
        shape = () if shape == "-" else tuple(int(s) for s in shape.split(","))
        offset, nbytes = int(offset), int(nbytes)
        out[name] = tensor_from_bytes(body[offset:offset + nbytes]).reshape(shape)
    return out


def state_dict(model) -> dict:
    """Parameters plus batch-norm running statistics, in a stable order."""
    out = {name: p.value for name, p in model.named_params()}
    for name, bn in model.batchnorms():
        out[f"{name}.running_mean"] = bn.running_mean
        out[f"{name}.running_var"] = bn.running_var
    return out


def load_state_dict(model, tensors: dict) -> None:
    expected = state_dict(model)
    missing = set(expected) - set(tensors)
    if missing:
        raise KeyError(f"checkpoint lacks {sorted(missing)[:5]}")
    for name, p in model.named_params():
        src = tensors[name]
        if src.shape != p.value.shape:
            raise ValueError(f"{name}: checkpoint shape {src.shape} != model shape {p.value.shape}")
        p.value[...] = src
    for name, bn in model.batchnorms():
        bn.running_mean[...] = tensors[f"{name}.running_mean"]
        bn.running_var[...] = tensors[f"{name}.running_var"]
