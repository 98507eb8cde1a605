"""Deterministic checkpoint container.

Layout: 8-byte magic, uint64 header length, canonical JSON header (sorted
keys, no whitespace), then the raw array payload in manifest order. Arrays
are little-endian C-order bytes; the manifest pins name, dtype and shape, so
equal model state produces byte-identical files and save-load-save is a
fixed point. Training draws are keyed by (seed, step), which makes the
optimizer tensors plus the step counter the entire resume state; no RNG
cursor needs recording.

Adam moments ride along as "adam.<param>.exp_avg" / ".exp_avg_sq" entries
with per-parameter step counts in the header.
"""

import json
from dataclasses import dataclass

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"LDIFFCK1"
VERSION = 1


@dataclass
class CheckpointState:
    version: int
    step: int
    config: dict
    arrays: dict  # name -> np.ndarray
    adam_steps: dict  # param name -> int


def _gather(model, optimizer):
    params = dict(model.named_parameters())
    arrays = {name: p.detach().cpu().numpy() for name, p in params.items()}
    adam_steps = {}
    if optimizer is not None:
        for name, p in params.items():
            state = optimizer.state.get(p)
            if not state:
                continue
            arrays[f"adam.{name}.exp_avg"] = state["exp_avg"].detach().cpu().numpy()
            arrays[f"adam.{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy()
            adam_steps[name] = int(state["step"])
    return arrays, adam_steps


def save_checkpoint(path, model, *, step: int, config: dict, optimizer=None) -> None:
    arrays, adam_steps = _gather(model, optimizer)
    manifest = [
        [name, np.dtype(arrays[name].dtype).newbyteorder("<").str, list(arrays[name].shape)]
        for name in sorted(arrays)
    ]
    header = {
        "version": VERSION,
        "step": int(step),
        "config": config,
        "adam_steps": adam_steps,
        "arrays": manifest,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint64(len(blob)).tobytes())
        f.write(blob)
        for name, dtype, _ in manifest:
            f.write(np.ascontiguousarray(arrays[name]).astype(dtype, copy=False).tobytes())


def read_checkpoint(path) -> CheckpointState:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    hlen = int(np.frombuffer(raw[8:16], dtype="<u8")[0])
    try:
        header = json.loads(raw[16 : 16 + hlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')!r}")
    arrays, off = {}, 16 + hlen
    for name, dtype, shape in header["arrays"]:
        n = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
        if off + n > len(raw):
            raise CheckpointError(f"{path}: truncated payload at {name!r}")
        arrays[name] = np.frombuffer(raw[off : off + n], dtype=dtype).reshape(shape).copy()
        off += n
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return CheckpointState(header["version"], header["step"], header["config"],
                           arrays, header["adam_steps"])


def apply_parameters(model, state: CheckpointState) -> None:
    params = dict(model.named_parameters())
    saved = {n for n in state.arrays if not n.startswith("adam.")}
    if saved != set(params):
        missing, extra = set(params) - saved, saved - set(params)
        raise CheckpointError(f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    with torch.no_grad():
        for name, p in params.items():
            arr = state.arrays[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr).to(p.dtype))


def apply_optimizer(optimizer, model, state: CheckpointState) -> None:
    """Rebuild Adam moments in place; params without saved state stay fresh."""
    for name, p in model.named_parameters():
        if name not in state.adam_steps:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(state.adam_steps[name])),
            "exp_avg": torch.from_numpy(state.arrays[f"adam.{name}.exp_avg"]).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(state.arrays[f"adam.{name}.exp_avg_sq"]).to(p.dtype),
        }
