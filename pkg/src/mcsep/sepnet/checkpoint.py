"""Byte-stable checkpoint container.

Layout: ``MAGIC`` | header length (u64 little endian) | JSON header |
tensor bytes.  The header lists every tensor (name, dtype, shape, offset)
in a fixed order, echoes the model config and carries the epoch, the
optimiser's scalar state and free-form metadata.  save -> load -> save
reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from ..errors import FormatError
from .config import ModelConfig

MAGIC = b"MCSEPCK1"
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


def _tensor_bytes(t: torch.Tensor):
    t = t.detach().cpu().contiguous()
    if t.dtype not in _DTYPES:
        raise FormatError(f"unsupported dtype {t.dtype}")
    return _DTYPES[t.dtype], np.ascontiguousarray(t.numpy(), dtype=_DTYPES[t.dtype]).tobytes()


def _optimizer_tensors(model, optimizer):
    """Adam moments keyed by parameter name, plus per-parameter step counts."""
    tensors, steps = [], {}
    if optimizer is None:
        return tensors, steps
    names = {id(p): n for n, p in model.named_parameters()}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            name = names[id(p)]
            steps[name] = int(st["step"])
            for key in ("exp_avg", "exp_avg_sq"):
                tensors.append((f"optim/{name}/{key}", st[key]))
    return tensors, steps


def encode_checkpoint(model, config: ModelConfig, epoch: int, optimizer=None, metadata=None) -> bytes:
    tensors = [(f"model/{n}", t) for n, t in model.state_dict().items()]
    opt_tensors, steps = _optimizer_tensors(model, optimizer)
    tensors += opt_tensors
    entries, blobs, offset = [], [], 0
    for name, t in tensors:
        dtype, blob = _tensor_bytes(t)
        entries.append({"name": name, "dtype": dtype, "shape": list(t.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": 1,
        "epoch": int(epoch),
        "config": config.to_dict(),
        "optimizer": None
        if optimizer is None
        else {"lr": optimizer.param_groups[0]["lr"], "betas": list(optimizer.param_groups[0]["betas"]), "steps": steps},
        "metadata": metadata or {},
        "tensors": entries,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(raw)) + raw + b"".join(blobs)


def save_checkpoint(path, model, config: ModelConfig, epoch: int, optimizer=None, metadata=None) -> Path:
    path = Path(path)
    data = encode_checkpoint(model, config, epoch, optimizer, metadata)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def decode_checkpoint(data: bytes):
    """Returns (header, {name: tensor})."""
    if data[: len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(data[start : start + n])
    except ValueError as exc:
        raise FormatError("corrupt checkpoint header") from exc
    base = start + n
    tensors = {}
    for e in header["tensors"]:
        lo = base + e["offset"]
        if lo + e["nbytes"] > len(data):
            raise FormatError(f"checkpoint truncated inside {e['name']}")
        arr = np.frombuffer(data, dtype=e["dtype"], count=e["nbytes"] // np.dtype(e["dtype"]).itemsize, offset=lo)
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return header, tensors


def load_checkpoint(path, model=None, optimizer=None):
    """Read a checkpoint; fills ``model``/``optimizer`` when given.

    Returns (config, epoch, metadata, model).  Without ``model`` a fresh
    one is built from the stored config.
    """
    header, tensors = decode_checkpoint(Path(path).read_bytes())
    config = ModelConfig.from_dict(header["config"])
    if model is None:
        from .models import build_model

        model = build_model(config)
    state = {k[len("model/") :]: v for k, v in tensors.items() if k.startswith("model/")}
    dtype = next(iter(state.values())).dtype if state else torch.float32
    if dtype == torch.float64:
        model.double()
    model.load_state_dict(state)
    if optimizer is not None and header["optimizer"] is not None:
        opt = header["optimizer"]
        params = dict(model.named_parameters())
        for g in optimizer.param_groups:
            g["lr"] = opt["lr"]
            g["betas"] = tuple(opt["betas"])
        optimizer.state.clear()
        for name, step in opt["steps"].items():
            p = params[name]
            optimizer.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": tensors[f"optim/{name}/exp_avg"].clone(),
                "exp_avg_sq": tensors[f"optim/{name}/exp_avg_sq"].clone(),
            }
    return config, header["epoch"], header["metadata"], model
