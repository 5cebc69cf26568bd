"""Binary checkpoint: fixed preamble, JSON header, float32 blob.

Layout (all integers little-endian)::

    magic    8 bytes  b"STMTCKPT"
    version  u32
    hlen     u64      length of the header in bytes
    header   hlen     UTF-8 JSON, sorted keys, compact separators
    blob     ...      little-endian float32 tensor data

The header's ``tensors`` table lists ``name``, ``shape``, ``offset`` and
``count`` (in elements) for every named tensor, in blob order; the entries
must tile the blob exactly.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError

MAGIC = b"STMTCKPT"
VERSION = 1
_PRE = struct.Struct("<8sIQ")


def _floats(obj):
    """Recursively turn numpy scalars/arrays into plain JSON values."""
    if isinstance(obj, dict):
        return {str(k): _floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_floats(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _floats(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass
class Checkpoint:
    model_config: dict
    tensors: dict                        # name -> float32 array, blob order
    train_config: dict | None = None
    class_weights: dict = field(default_factory=dict)
    seed: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def from_model(cls, model, train_cfg=None, class_weights=None, history=None):
        tensors = {n: np.array(t.data, dtype="<f4") for n, t in model.named_tensors()}
        tc = train_cfg.to_dict() if train_cfg is not None else None
        return cls(model.cfg.to_dict(), tensors, tc, _floats(class_weights or {}),
                   int(tc["seed"]) if tc else int(model.cfg.seed), _floats(history or []))

    @property
    def taxonomy(self):
        from .data.taxonomy import Taxonomy
        return Taxonomy.from_dict(self.model_config["taxonomy"])

    def to_model(self):
        from .model import ModelConfig, build_model
        model = build_model(ModelConfig.from_dict(self.model_config))
        load_state(model, self.tensors)
        model.eval()
        return model

    # ------------------------------------------------------------------

    def header(self):
        table, off = [], 0
        for name, arr in self.tensors.items():
            table.append({"name": name, "shape": list(arr.shape), "offset": off, "count": int(arr.size)})
            off += int(arr.size)
        return {
            "format": "stylemt-checkpoint",
            "version": VERSION,
            "model_config": _floats(self.model_config),
            "train_config": _floats(self.train_config),
            "taxonomy": _floats(self.model_config.get("taxonomy")),
            "class_weights": _floats(self.class_weights),
            "seed": self.seed,
            "history": _floats(self.history),
            "tensors": table,
            "blob_elements": off,
        }

    def to_bytes(self):
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":"), allow_nan=True).encode("utf-8")
        blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in self.tensors.values())
        return _PRE.pack(MAGIC, VERSION, len(head)) + head + blob

    @classmethod
    def from_bytes(cls, buf):
        if len(buf) < _PRE.size:
            raise CheckpointError("file too short for a checkpoint preamble")
        magic, version, hlen = _PRE.unpack_from(buf)
        if magic != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
        start = _PRE.size
        if start + hlen > len(buf):
            raise CheckpointError("truncated checkpoint header")
        try:
            head = json.loads(buf[start:start + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt checkpoint header: {e}") from None
        blob = buf[start + hlen:]
        try:
            table = head["tensors"]
            total = head["blob_elements"]
        except (KeyError, TypeError):
            raise CheckpointError("checkpoint header lacks the tensor table") from None
        if len(blob) != 4 * total:
            raise CheckpointError(f"blob holds {len(blob)} bytes, header declares {4 * total}")
        tensors, off = {}, 0
        for ent in table:
            try:
                name, shape, o, count = ent["name"], tuple(ent["shape"]), ent["offset"], ent["count"]
            except (KeyError, TypeError):
                raise CheckpointError("malformed tensor table entry") from None
            if o != off or count != int(np.prod(shape, dtype=np.int64)) or count < 1:
                raise CheckpointError(f"offset table corrupt at tensor {name!r}")
            if name in tensors:
                raise CheckpointError(f"duplicate tensor {name!r}")
            tensors[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=4 * o).reshape(shape).copy()
            off += count
        if off != total:
            raise CheckpointError("offset table does not cover the blob")
        return cls(head["model_config"], tensors, head.get("train_config"), head.get("class_weights", {}),
                   head.get("seed", 0), head.get("history", []))


def load_state(model, tensors):
    """Copy named arrays into a model; names and shapes must match exactly."""
    own = dict(model.named_tensors())
    if set(own) != set(tensors):
        missing = sorted(set(own) - set(tensors))
        extra = sorted(set(tensors) - set(own))
        raise CheckpointError(f"tensor names differ from the model: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, t in own.items():
        arr = tensors[name]
        if arr.shape != t.data.shape:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, model expects {t.data.shape}")
        t.data = np.array(arr, dtype=t.data.dtype)
        t.grad = None


def save_checkpoint(path, ckpt):
    data = ckpt.to_bytes()
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return Checkpoint.from_bytes(fh.read())
