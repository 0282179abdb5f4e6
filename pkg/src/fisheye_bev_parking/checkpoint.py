"""Single-file checkpoints: little-endian header length, JSON header, raw buffers."""

from __future__ import annotations

import json
import os
import struct
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import Tensor, nn

from .errors import CheckpointMismatchError

FORMAT = "fisheye-bev-parking/checkpoint-v1"

_DTYPES: dict[torch.dtype, str] = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


def save_checkpoint(
    path: str | Path,
    tensors: Mapping[str, Tensor],
    metadata: Mapping[str, Any] | None = None,
) -> None:
    """Write tensors in name order; the file is replaced atomically."""
    entries: list[dict[str, Any]] = []
    buffers: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        tensor = tensors[name].detach().cpu()
        dtype = _DTYPES.get(tensor.dtype)
        if dtype is None:
            raise TypeError(f"unsupported dtype {tensor.dtype} for {name!r}")
        raw = np.ascontiguousarray(tensor.numpy(), dtype=np.dtype(dtype)).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(tensor.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        buffers.append(raw)
        offset += len(raw)

    header = json.dumps(
        {"format": FORMAT, "metadata": dict(metadata or {}), "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_suffix(target.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in buffers:
            fh.write(raw)
    os.replace(tmp, target)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict[str, Any]]:
    blob = Path(path).read_bytes()
    (header_len,) = struct.unpack_from("<Q", blob, 0)
    header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    if header.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} file")
    base = 8 + header_len
    tensors: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        array = np.frombuffer(blob, dtype=dtype, count=count, offset=start)
        native = array.reshape(entry["shape"]).astype(dtype.newbyteorder("="))
        tensor = torch.from_numpy(native)
        tensors[entry["name"]] = tensor
    return tensors, dict(header["metadata"])


def load_model_state(model: nn.Module, tensors: Mapping[str, Tensor], path: str | Path) -> None:
    """Load ``model.*`` tensors, listing every name or shape mismatch before touching the model."""
    state = model.state_dict()
    stored = {k.removeprefix("model/"): v for k, v in tensors.items() if k.startswith("model/")}
    mismatches: list[str] = []
    for name, value in state.items():
        if name not in stored:
            mismatches.append(f"{name}: missing from checkpoint")
        elif tuple(stored[name].shape) != tuple(value.shape):
            mismatches.append(
                f"{name}: checkpoint {tuple(stored[name].shape)} vs model {tuple(value.shape)}"
            )
    mismatches.extend(f"{name}: not in model" for name in stored if name not in state)
    if mismatches:
        raise CheckpointMismatchError(path=str(path), mismatches=mismatches)
    model.load_state_dict({k: v.to(state[k].dtype) for k, v in stored.items()})


def model_tensors(model: nn.Module) -> dict[str, Tensor]:
    return {f"model/{k}": v for k, v in model.state_dict().items()}
