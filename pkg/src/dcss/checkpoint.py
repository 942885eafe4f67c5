"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"DCSSCKPT"                      8-byte magic
    u32 version                      currently 1
    u32 meta_len, meta bytes         UTF-8 JSON, sorted keys; holds "model_spec"
                                     plus free-form run metadata
    u32 n_entries
    n_entries x entry:
        u16 name_len, name bytes     UTF-8 parameter name
        u8  kind                     0 weight, 1 gate logits, 2 buffer
        u8  dtype tag                1 float32, 2 float64, 3 int64
        u8  ndim, ndim x u32 dims
        raw values                   C order, little-endian

Entries are written in registry order (weights, gates, buffers), so
save -> load -> save is byte-identical. Batch-norm buffers are stored as
``<layer>.bn.running_mean``, ``<layer>.bn.running_var`` and an int64 scalar
``<layer>.bn.initialized``.
"""

import json
import struct

import numpy as np

from .models import ModelSpec, build_model

MAGIC = b"DCSSCKPT"
VERSION = 1
KIND_WEIGHT, KIND_GATE, KIND_BUFFER = 0, 1, 2
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


class CheckpointError(ValueError):
    pass


def _entries(model):
    for name, t in model.weights().items():
        yield name, KIND_WEIGHT, t.values
    for name, t in model.gates().items():
        yield name, KIND_GATE, t.values
    for name, bn in model.buffers().items():
        yield f"{name}.running_mean", KIND_BUFFER, bn.running_mean
        yield f"{name}.running_var", KIND_BUFFER, bn.running_var
        yield f"{name}.initialized", KIND_BUFFER, np.asarray(int(bn.initialized), dtype=np.int64)


def to_bytes(model, meta=None):
    meta = dict(meta or {})
    meta["model_spec"] = json.loads(model.spec.to_json())
    mbytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    entries = list(_entries(model))
    out = [MAGIC, struct.pack("<II", VERSION, len(mbytes)), mbytes, struct.pack("<I", len(entries))]
    for name, kind, arr in entries:
        arr = np.asarray(arr)
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<BBB", kind, tag, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(out)


def save_checkpoint(path, model, meta=None):
    data = to_bytes(model, meta)
    with open(path, "wb") as f:
        f.write(data)
    return data


def _parse(buf):
    if buf[:8] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:8]!r}")
    pos = 8
    version, mlen = struct.unpack_from("<II", buf, pos)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += 8
    meta = json.loads(buf[pos:pos + mlen].decode("utf-8"))
    pos += mlen
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    entries = []
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nl].decode("utf-8")
        pos += nl
        kind, tag, ndim = struct.unpack_from("<BBB", buf, pos)
        pos += 3
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        dt = _DTYPES[tag]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + size > len(buf):
            raise CheckpointError(f"entry {name} truncated at offset {pos}")
        arr = np.frombuffer(buf, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(shape)
        pos += size
        entries.append((name, kind, arr.astype(dt.newbyteorder("="))))
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last entry")
    return meta, entries


def from_bytes(buf):
    try:
        meta, entries = _parse(buf)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError) as e:
        raise CheckpointError(f"corrupt checkpoint ({len(buf)} bytes): {type(e).__name__}: {e}") from e
    spec = ModelSpec.from_dict(meta["model_spec"])
    model = build_model(spec)
    weights, gates, buffers = model.weights(), model.gates(), model.buffers()
    seen = set()
    for name, kind, arr in entries:
        if kind == KIND_WEIGHT:
            target = weights.get(name)
        elif kind == KIND_GATE:
            target = gates.get(name)
        else:
            layer, _, field = name.rpartition(".")
            bn = buffers.get(layer)
            if bn is None:
                raise CheckpointError(f"checkpoint buffer {name} has no matching layer")
            if field == "initialized":
                bn.initialized = bool(arr)
            else:
                setattr(bn, field, arr.copy())
            seen.add(name)
            continue
        if target is None:
            raise CheckpointError(f"checkpoint entry {name} has no matching parameter")
        if target.shape != arr.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {target.shape}")
        target.values = arr.astype(target.dtype, copy=True)
        seen.add(name)
    missing = (set(weights) | set(gates)) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)}")
    return model, meta


def load_checkpoint(path):
    with open(path, "rb") as f:
        return from_bytes(f.read())
