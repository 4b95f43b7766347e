"""Binary checkpoints: bit-exact round trips, little-endian, 64-bit values.

Layout: magic, format version, config hash, then named float64 records for
every parameter leaf, then (optionally) the optimizer moments and step.
Loading verifies magic, version and config hash; a hash mismatch is
refused unless forced.
"""

from __future__ import annotations

import io
import struct

import numpy as np

MAGIC = b"SMCK"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _write_record(f, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    f.write(struct.pack("<H", len(encoded)))
    f.write(encoded)
    arr = np.asarray(arr, dtype="<f8")
    f.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        f.write(struct.pack("<I", dim))
    f.write(arr.tobytes(order="C"))


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint file")
    return data


def _read_record(f) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(f, 1))
    shape = tuple(
        struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(ndim)
    )
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8").reshape(shape)
    return name, data.copy()


def save_checkpoint(path: str, leaves: dict, config_hash: bytes,
                    optimizer=None) -> None:
    """Write named tensors (and optional AdamW state) to `path`."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        if len(config_hash) != 32:
            raise CheckpointError("config hash must be 32 bytes")
        f.write(config_hash)
        names = sorted(leaves)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            _write_record(f, name, leaves[name].data)
        if optimizer is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(struct.pack("<Q", optimizer.step_count))
            for name in names:
                _write_record(f, name, optimizer.m[name])
                _write_record(f, name, optimizer.v[name])


def load_checkpoint(path: str, config_hash: bytes | None = None,
                    force: bool = False):
    """Read a checkpoint; returns (arrays, optimizer_state_or_None, hash)."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise CheckpointError(f"{path} is not a segmem checkpoint")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise CheckpointError(
                f"checkpoint format version {version} not supported "
                f"(expected {VERSION})"
            )
        stored_hash = _read_exact(f, 32)
        if config_hash is not None and stored_hash != config_hash and not force:
            raise CheckpointError(
                "checkpoint was written under a different config "
                "(pass force=True to load anyway)"
            )
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        arrays = {}
        for _ in range(count):
            name, arr = _read_record(f)
            arrays[name] = arr
        (has_opt,) = struct.unpack("<B", _read_exact(f, 1))
        opt_state = None
        if has_opt:
            (step_count,) = struct.unpack("<Q", _read_exact(f, 8))
            m = {}
            v = {}
            for _ in range(count):
                name, arr = _read_record(f)
                m[name] = arr
                name2, arr2 = _read_record(f)
                v[name2] = arr2
            opt_state = {"step_count": step_count, "m": m, "v": v}
    return arrays, opt_state, stored_hash


def restore_params(params, arrays: dict) -> None:
    """Load checkpoint arrays into an existing model's leaves, bit-exact."""
    leaves = dict(params.leaves())
    missing = set(leaves) - set(arrays)
    extra = set(arrays) - set(leaves)
    if missing or extra:
        raise CheckpointError(
            f"leaf mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
        )
    for name, leaf in leaves.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(leaf.shape):
            raise CheckpointError(
                f"shape mismatch for {name}: {arr.shape} vs {leaf.shape}"
            )
        leaf.data = arr.astype(leaf.data.dtype)
