"""Self-describing checkpoint container.

Layout::

    b"MSDK1"  magic
    uint64    manifest length in bytes, little endian
    manifest  UTF-8 JSON, keys sorted: {"config": ..., "meta": ..., "tensors": [...]}
    payload   raw little-endian tensor bytes, in manifest order

Each tensor entry records ``name``, ``shape``, ``dtype`` and the byte
``offset`` and ``nbytes`` of its data relative to the payload start.
"""

import json
import struct
from collections import OrderedDict

import numpy as np

from .model import ModelConfig, build, fuse_model
from .reparam import FusedBlock

MAGIC = b"MSDK1"


class CheckpointError(ValueError):
    pass


def dumps(state, config=None, meta=None):
    entries, chunks, offset = [], [], 0
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"config": config, "meta": meta or {}, "tensors": entries},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(manifest)) + manifest + b"".join(chunks)


def loads(blob):
    """Inverse of :func:`dumps`: returns ``(state, config, meta)``."""
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not an MSDK1 checkpoint (bad magic)")
    head = len(MAGIC) + 8
    if len(blob) < head:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack("<Q", blob[len(MAGIC):head])
    try:
        manifest = json.loads(blob[head:head + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from None
    payload = memoryview(blob)[head + n:]
    state = OrderedDict()
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"tensor {e['name']} runs past the end of the file")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=np.dtype(e["dtype"]))
        state[e["name"]] = arr.reshape(e["shape"]).astype(arr.dtype.newbyteorder("="))
    return state, manifest["config"], manifest["meta"]


def save(path, state, config=None, meta=None):
    with open(path, "wb") as fh:
        fh.write(dumps(state, config, meta))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def save_model(path, model, meta=None):
    """Write a model's weights and buffers with its configuration.

    A model whose RepBlocks have been fused is flagged so that loading
    rebuilds the same structure.
    """
    meta = dict(meta or {})
    meta["fused"] = any(isinstance(m, FusedBlock) for _, m in model.named_modules())
    save(path, model.state_dict(), model.cfg.to_dict(), meta)


def load_model(path):
    """Rebuild the model stored at ``path``; returns ``(model, meta)``."""
    state, config, meta = load(path)
    if config is None:
        raise CheckpointError(f"{path}: checkpoint carries no model configuration")
    model = build(ModelConfig.from_dict(config))
    if meta.get("fused"):
        model = fuse_model(model)
    dtype = next(iter(state.values())).dtype if state else np.float64
    model.astype(dtype).load_state_dict(state)
    return model.eval(), meta
