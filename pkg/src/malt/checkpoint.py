"""Binary checkpoints and run manifests.

Checkpoint layout, little-endian throughout::

    b"MALT"  u32 version
    u32 meta_len, meta_len bytes of canonical JSON
        {config, epoch, adam_step, rng_state, history}
    u32 record count, then per record:
        u32 name_len, name (utf-8), u32 ndim, u64 dims[ndim], f64 payload
    record names: "param/<name>", "adam_m/<name>", "adam_v/<name>"

Metadata JSON is written with sorted keys and shortest-repr floats, so
save -> load -> save reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import MaltConfig
from .model import build_model
from .rng import rng_from_state_json, rng_state_json
from .training import TrainState

MAGIC = b"MALT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def state_to_bytes(state: TrainState) -> bytes:
    store = state.model.store
    meta = {
        "config": state.config.to_dict(),
        "epoch": state.epoch,
        "adam_step": store.step,
        "rng_state": rng_state_json(state.rng),
        "history": state.history,
    }
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    records = []
    for name, entry in store.items():
        records.append(_pack_record(f"param/{name}", entry.value))
        records.append(_pack_record(f"adam_m/{name}", entry.m))
        records.append(_pack_record(f"adam_v/{name}", entry.v))
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta_raw)), meta_raw,
           struct.pack("<I", len(records)), *records]
    return b"".join(out)


def _read(buf: bytes, off: int, fmt: str):
    size = struct.calcsize(fmt)
    if off + size > len(buf):
        raise CheckpointError("checkpoint truncated")
    return struct.unpack_from(fmt, buf, off), off + size


def state_from_bytes(buf: bytes, expected: MaltConfig | None = None) -> TrainState:
    """Rebuild a :class:`TrainState`; refuses a checkpoint whose config differs from ``expected``."""
    if buf[:4] != MAGIC:
        raise CheckpointError("not a MALT checkpoint (bad magic)")
    (version,), off = _read(buf, 4, "<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,), off = _read(buf, off, "<I")
    meta = json.loads(buf[off:off + meta_len].decode())
    off += meta_len
    cfg = MaltConfig.from_dict(meta["config"])
    if expected is not None and expected.canonical_json() != cfg.canonical_json():
        raise CheckpointError("checkpoint config does not match the requested config")
    (count,), off = _read(buf, off, "<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,), off = _read(buf, off, "<I")
        name = buf[off:off + nlen].decode()
        off += nlen
        (ndim,), off = _read(buf, off, "<I")
        shape, off = _read(buf, off, f"<{ndim}Q")
        n = int(np.prod(shape)) if ndim else 1
        if off + 8 * n > len(buf):
            raise CheckpointError("checkpoint truncated")
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(buf):
        raise CheckpointError("trailing bytes after last record")

    model = build_model(cfg)
    store = model.store
    for name, entry in store.items():
        try:
            value, m, v = (arrays.pop(f"{k}/{name}") for k in ("param", "adam_m", "adam_v"))
        except KeyError:
            raise CheckpointError(f"checkpoint lacks tensors for parameter {name!r}") from None
        if value.shape != entry.value.shape:
            raise CheckpointError(f"{name}: shape {value.shape} vs model {entry.value.shape}")
        entry.tensor.data = value
        entry.m = m
        entry.v = v
    if arrays:
        raise CheckpointError(f"unknown tensors in checkpoint: {sorted(arrays)[:3]}")
    store.step = int(meta["adam_step"])
    return TrainState(model=model, rng=rng_from_state_json(meta["rng_state"]),
                      epoch=int(meta["epoch"]), history=list(meta["history"]))


def save_checkpoint(path: str | Path, state: TrainState) -> None:
    Path(path).write_bytes(state_to_bytes(state))


def load_checkpoint(path: str | Path, expected: MaltConfig | None = None) -> TrainState:
    return state_from_bytes(Path(path).read_bytes(), expected)


def write_manifest(path: str | Path, cfg: MaltConfig, data_hash: str, history: list[dict]) -> dict:
    manifest = {"config_hash": cfg.hash(), "seed": cfg.seed, "data_hash": data_hash,
                "history": history}
    Path(path).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest
