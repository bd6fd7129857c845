"""Binary checkpoint container.

Byte layout (all integers little-endian)::

    offset 0   8 bytes   magic b"PLIFTCK\\n"
    offset 8   u32       format version (FORMAT_VERSION)
    offset 12  u64       header length H in bytes
    offset 20  H bytes   UTF-8 JSON header
    offset 20+H          payload: tensors as little-endian float64, C order

The JSON header carries ``meta`` (schema version, representation id, seed,
config hash, ...), ``rng`` (numpy bit-generator states by stream name) and
``tensors``: a list of ``{"store", "kind", "name", "shape", "offset"}`` where
``kind`` is one of params/buffers/m/v and ``offset`` is relative to the payload
start. Per-store Adam step counters live in ``steps``. Floats are stored as raw
bits, so save/load round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from ..errors import CheckpointError
from .params import ParamStore

MAGIC = b"PLIFTCK\n"
FORMAT_VERSION = 1
_KINDS = ("params", "buffers", "m", "v")
_LE_F64 = np.dtype("<f8")


def save_checkpoint(
    path: str | Path,
    stores: Iterable[ParamStore],
    meta: Mapping[str, Any],
    rng_states: Mapping[str, Any] | None = None,
) -> Path:
    path = Path(path)
    tensors = []
    chunks = []
    offset = 0
    steps = {}
    for store in stores:
        steps[store.name] = store.step
        for kind in _KINDS:
            for name, arr in getattr(store, kind).items():
                data = np.ascontiguousarray(arr, dtype=_LE_F64).tobytes()
                tensors.append(
                    {"store": store.name, "kind": kind, "name": name, "shape": list(arr.shape), "offset": offset}
                )
                chunks.append(data)
                offset += len(data)
    header = {
        "meta": dict(meta),
        "rng": dict(rng_states or {}),
        "steps": steps,
        "tensors": tensors,
        "payload_bytes": offset,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    return path


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        header, _ = _read_header(fh, path)
    return header


def _read_header(fh, path) -> tuple[dict, int]:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a poselift checkpoint")
    raw = fh.read(12)
    if len(raw) != 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", raw)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    blob = fh.read(hlen)
    if len(blob) != hlen:
        raise CheckpointError(f"{path}: truncated header")
    return json.loads(blob.decode("utf-8")), len(MAGIC) + 12 + hlen


def load_checkpoint(path: str | Path) -> tuple[dict[str, ParamStore], dict, dict]:
    """Returns ``(stores_by_name, meta, rng_states)``."""
    with open(path, "rb") as fh:
        header, _ = _read_header(fh, path)
        payload = fh.read()
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    stores: dict[str, ParamStore] = {}
    for name, step in header["steps"].items():
        stores[name] = ParamStore(name, step=int(step))
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype=_LE_F64, count=count, offset=t["offset"]).reshape(shape)
        getattr(stores[t["store"]], t["kind"])[t["name"]] = arr.astype(np.float64)
    return stores, header["meta"], header["rng"]
