"""Binary checkpoints: network spec, parameters, optimizer and RNG state.

Layout (all integers little-endian):

    magic "MGMC" | version u32
    spec JSON    (u32 length + utf-8 bytes)
    parameters   (u32 count, then per tensor:
                  u32 name length + name, u32 rank, rank x u32 dims,
                  float32 LE values)
    buffers      (same tensor layout; batch-norm running statistics)
    optimizer    (same tensor layout; RMSProp accumulators)
    meta JSON    (u32 length + bytes: optimizer hyperparams, RNG state)
    step counter u64

Loading rebuilds the network from the spec and overwrites every value,
so a round trip reproduces forward outputs bit for bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from mgmem.networks import Network, build_network, spec_from_dict, spec_to_dict

MAGIC = b"MGMC"
VERSION = 1


class CheckpointError(RuntimeError):
    """Corrupt, truncated, or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    net: Network
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_meta: dict = field(default_factory=dict)
    rng_state: Optional[dict] = None
    step: int = 0


def _named_buffers(net: Network) -> dict[str, np.ndarray]:
    """Non-trainable state that forward passes depend on (norm running stats)."""
    out: dict[str, np.ndarray] = {}

    def conv_stack(prefix, layers):
        for i, layer in enumerate(layers):
            for j, lv in enumerate(layer.levels):
                if lv.norm is not None:
                    out[f"{prefix}.L{i}.v{j}.running_mean"] = lv.norm.running_mean
                    out[f"{prefix}.L{i}.v{j}.running_var"] = lv.norm.running_var

    if hasattr(net, "readers"):
        for r, reader in enumerate(net.readers):
            conv_stack(f"reader{r}", reader.layers)
    if hasattr(net, "tail"):
        conv_stack("tail", net.tail)
    return out


def _write_tensor_section(f, tensors: dict[str, np.ndarray]) -> None:
    f.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        if arr.dtype != np.float32:
            raise CheckpointError(
                f"checkpoints store float32 values; {name} is {arr.dtype}")
        encoded = name.encode("utf-8")
        f.write(struct.pack("<I", len(encoded)))
        f.write(encoded)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f, size: int) -> bytes:
    buf = f.read(size)
    if len(buf) != size:
        raise CheckpointError("unexpected end of checkpoint file")
    return buf


def _read_struct(f, fmt: str):
    return struct.unpack(fmt, _read_exact(f, struct.calcsize(fmt)))


def _read_tensor_section(f) -> dict[str, np.ndarray]:
    (count,) = _read_struct(f, "<I")
    out = {}
    for _ in range(count):
        (name_len,) = _read_struct(f, "<I")
        name = _read_exact(f, name_len).decode("utf-8")
        (rank,) = _read_struct(f, "<I")
        dims = _read_struct(f, f"<{rank}I")
        size = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(_read_exact(f, 4 * size), dtype="<f4").reshape(dims).copy()
        out[name] = values
    return out


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    net = ckpt.net
    spec_blob = json.dumps(spec_to_dict(net.spec)).encode("utf-8")
    meta = {
        "optimizer": ckpt.optimizer_meta,
        "rng": ckpt.rng_state,
    }
    meta_blob = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(spec_blob)))
        f.write(spec_blob)
        _write_tensor_section(f, {name: t.data for name, t in net.params.items()})
        _write_tensor_section(f, _named_buffers(net))
        _write_tensor_section(f, ckpt.optimizer_state)
        f.write(struct.pack("<I", len(meta_blob)))
        f.write(meta_blob)
        f.write(struct.pack("<Q", ckpt.step))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        (version,) = _read_struct(f, "<I")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (spec_len,) = _read_struct(f, "<I")
        try:
            spec = spec_from_dict(json.loads(_read_exact(f, spec_len)))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise CheckpointError(f"unreadable network spec: {exc}") from exc
        params = _read_tensor_section(f)
        buffers = _read_tensor_section(f)
        opt = _read_tensor_section(f)
        (meta_len,) = _read_struct(f, "<I")
        meta = json.loads(_read_exact(f, meta_len))
        (step,) = _read_struct(f, "<Q")

    net = build_network(spec, 0)
    if set(params) != set(net.params):
        missing = set(net.params) ^ set(params)
        raise CheckpointError(f"parameter table mismatch: {sorted(missing)[:4]}")
    for name, arr in params.items():
        t = net.params[name]
        if t.data.shape != arr.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: file {arr.shape}, spec {t.data.shape}")
        t.data[:] = arr
    net_buffers = _named_buffers(net)
    for name, arr in buffers.items():
        if name not in net_buffers or net_buffers[name].shape != arr.shape:
            raise CheckpointError(f"unknown or misshaped buffer {name}")
        net_buffers[name][:] = arr
    return Checkpoint(
        net=net,
        optimizer_state=opt,
        optimizer_meta=meta.get("optimizer") or {},
        rng_state=meta.get("rng"),
        step=step,
    )
