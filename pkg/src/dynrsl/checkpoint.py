"""Binary checkpoints.

Layout (all integers little-endian uint32)::

    b"DRSL" | version | len | config JSON (UTF-8, sorted keys)
    | count | count x (len | name UTF-8 | ndim | dims...)
    | parameter payloads, float32 little-endian row-major, in table order
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .alignment import DynRslModel
from .encoders import EncoderConfig
from .errors import FormatError, ShapeError
from .patchify import PatchConfig

MAGIC = b"DRSL"
VERSION = 1
_U32 = struct.Struct("<I")


def model_config(model: DynRslModel) -> dict:
    enc = dict(vars(model.cfg))
    enc["vocab"] = list(enc["vocab"])
    return {"encoder": enc, "patch": dict(vars(model.patch_cfg))}


def encode_checkpoint(model: DynRslModel, extra: dict | None = None) -> bytes:
    config = model_config(model)
    if extra:
        config["extra"] = extra
    params = list(model.named_parameters())
    out = bytearray(MAGIC)
    out += _U32.pack(VERSION)
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out += _U32.pack(len(blob)) + blob
    out += _U32.pack(len(params))
    for name, p in params:
        raw = name.encode("utf-8")
        out += _U32.pack(len(raw)) + raw + _U32.pack(p.data.ndim)
        for d in p.shape:
            out += _U32.pack(d)
    for _, p in params:
        out += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    return bytes(out)


def save_checkpoint(model: DynRslModel, path: str | os.PathLike, extra: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model, extra))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def decode_checkpoint(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """(config snapshot, name -> float32 array) from checkpoint bytes."""
    r = _Reader(raw)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a checkpoint", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    n = r.u32("config length")
    at = r.pos
    try:
        config = json.loads(r.take(n, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("config block is not valid JSON", at) from None
    count = r.u32("parameter count")
    table = []
    for _ in range(count):
        at = r.pos
        try:
            name = r.take(r.u32("name length"), "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("parameter name is not UTF-8", at) from None
        shape = tuple(r.u32("dimension") for _ in range(r.u32("rank")))
        table.append((name, shape))
    params = {}
    for name, shape in table:
        size = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(4 * size, f"payload of {name}"), dtype="<f4").reshape(shape)
    if r.pos != len(raw):
        raise FormatError("trailing bytes after the last payload", r.pos)
    return config, params


def load_into(model: DynRslModel, params: dict[str, np.ndarray]) -> DynRslModel:
    """Copy arrays into the model's parameters; names and shapes must match."""
    own = dict(model.named_parameters())
    if set(own) != set(params):
        missing = sorted(set(own) - set(params))[:3]
        unknown = sorted(set(params) - set(own))[:3]
        raise ShapeError(f"parameter names differ (missing {missing}, unexpected {unknown})")
    for name, p in own.items():
        if p.shape != params[name].shape:
            raise ShapeError(f"{name}: checkpoint shape {params[name].shape} vs model shape {p.shape}")
    for name, p in own.items():
        p.data[...] = params[name].astype(np.float64)
    return model


def load_checkpoint(path: str | os.PathLike, model: DynRslModel | None = None) -> DynRslModel:
    """Load into ``model`` if given (shapes must agree), otherwise build a
    model from the stored config."""
    config, params = decode_checkpoint(Path(path).read_bytes())
    if model is None:
        model = model_from_config(config)
    return load_into(model, params)


def model_from_config(config: dict) -> DynRslModel:
    try:
        enc = dict(config["encoder"])
        enc["vocab"] = tuple(enc["vocab"])
        return DynRslModel(EncoderConfig(**enc), PatchConfig(**config["patch"]))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"config snapshot is incomplete ({exc})") from None
