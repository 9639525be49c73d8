"""Binary weight checkpoint files.

Layout, all little-endian:

    bytes 0..7   magic "FDSRW001"
    u32          format version (currently 1)
    u8           precision tag: bytes per scalar, 4 (single) or 8 (double)
    u32          tensor count
    per tensor   u16 name length, name (utf-8), 4 x u32 shape extents,
                 raw scalar data in row-major order

Round-trips are bit-exact. Structural metadata (model kind, scale, stage
count) rides along as reserved "meta/..." scalar tensors so one container
format covers every parameter set.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

from .errors import FormatError, UsageError
from .networks import (ClassifierHead, ExtractorParams, GeneratorConfig,
                       GeneratorParams)
from .tensor import Tensor

MAGIC = b"FDSRW001"
VERSION = 1
_ITEMSIZE_TO_DTYPE = {4: np.dtype("<f4"), 8: np.dtype("<f8")}

_KIND_GENERATOR = 1.0
_KIND_EXTRACTOR = 2.0
_KIND_HEAD = 3.0
_KIND_STATE = 4.0


def write_tensor_file(path, tensors, precision: str = "single") -> None:
    """Serialize an ordered name -> Tensor map; all entries share precision."""
    itemsize = 4 if precision == "single" else 8
    dtype = _ITEMSIZE_TO_DTYPE[itemsize]
    chunks = [MAGIC, struct.pack("<IBI", VERSION, itemsize, len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise UsageError(f"tensor name too long: {name[:32]}...")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(np.asarray(t.shape, dtype="<u4").tobytes())
        chunks.append(np.ascontiguousarray(t.data, dtype=dtype).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_tensor_file(path) -> "OrderedDict[str, Tensor]":
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated file while reading {what}", offset=pos)
        piece = blob[pos:pos + n]
        pos += n
        return piece

    if take(8, "magic") != MAGIC:
        raise FormatError(f"bad magic bytes, expected {MAGIC!r}", offset=0)
    version, itemsize, count = struct.unpack("<IBI", take(9, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", offset=8)
    if itemsize not in _ITEMSIZE_TO_DTYPE:
        raise FormatError(f"unknown precision tag {itemsize}", offset=12)
    dtype = _ITEMSIZE_TO_DTYPE[itemsize]

    tensors: OrderedDict[str, Tensor] = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        shape = tuple(np.frombuffer(take(16, f"shape of {name}"), dtype="<u4"))
        n_items = int(np.prod([int(s) for s in shape], dtype=np.int64))
        payload = take(n_items * itemsize, f"data of {name}")
        arr = np.frombuffer(payload, dtype=dtype).reshape([int(s) for s in shape])
        tensors[name] = Tensor(np.ascontiguousarray(
            arr, dtype=np.float32 if itemsize == 4 else np.float64))
    if pos != len(blob):
        raise FormatError("trailing bytes after final tensor record", offset=pos)
    return tensors


def _meta_scalar(value: float, precision: str) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), value,
                          dtype=np.float32 if precision == "single" else np.float64))


def _pop_meta(tensors, name) -> float:
    try:
        return float(tensors.pop(name).data.reshape(()))
    except KeyError:
        raise FormatError(f"missing metadata entry {name!r}") from None


def save_weights(params, path) -> None:
    """Persist generator, extractor or classifier-head weights."""
    if isinstance(params, GeneratorParams):
        precision = next(iter(params.tensors.values())).precision
        out = params.named_tensors()
        cfg = params.config
        out["meta/kind"] = _meta_scalar(_KIND_GENERATOR, precision)
        out["meta/scale"] = _meta_scalar(cfg.scale, precision)
        out["meta/stages"] = _meta_scalar(cfg.stages, precision)
        out["meta/base_channels"] = _meta_scalar(cfg.base_channels, precision)
        out["meta/in_channels"] = _meta_scalar(cfg.in_channels, precision)
        out["meta/feat_channels"] = _meta_scalar(cfg.feat_channels, precision)
    elif isinstance(params, ExtractorParams):
        precision = next(iter(params.tensors.values())).precision
        out = params.named_tensors()
        out["meta/kind"] = _meta_scalar(_KIND_EXTRACTOR, precision)
        out["meta/in_channels"] = _meta_scalar(params.in_channels, precision)
    elif isinstance(params, ClassifierHead):
        precision = next(iter(params.tensors.values())).precision
        out = params.named_tensors()
        out["meta/kind"] = _meta_scalar(_KIND_HEAD, precision)
    else:
        raise UsageError(f"cannot save object of type {type(params).__name__}")
    write_tensor_file(path, out, precision)


def load_weights(path):
    """Load whatever parameter object the file declares."""
    tensors = read_tensor_file(path)
    kind = _pop_meta(tensors, "meta/kind")
    if kind == _KIND_GENERATOR:
        cfg = GeneratorConfig(
            scale=int(_pop_meta(tensors, "meta/scale")),
            stages=int(_pop_meta(tensors, "meta/stages")),
            base_channels=int(_pop_meta(tensors, "meta/base_channels")),
            in_channels=int(_pop_meta(tensors, "meta/in_channels")),
            feat_channels=int(_pop_meta(tensors, "meta/feat_channels")),
        )
        return GeneratorParams(cfg, tensors)
    if kind == _KIND_EXTRACTOR:
        in_channels = int(_pop_meta(tensors, "meta/in_channels"))
        return ExtractorParams(in_channels, tensors)
    if kind == _KIND_HEAD:
        return ClassifierHead(tensors)
    raise FormatError(f"unknown model kind tag {kind}")
