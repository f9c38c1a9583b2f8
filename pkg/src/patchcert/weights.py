"""Portable binary container for model weights and single tensors.

Layout (all integers little-endian)::

    magic   4s   b"PCRT"
    version u16  (1)
    layers  u16
    input   3*u16  C, H, W          (zeros for a bare tensor)
    classes u16
    surf    u16  superficial layer index
    per layer:
        kind    u8   0=tensor 1=conv 2=relu 3=maxpool 4=globalavgpool 5=dense
        geom    3*u16  kernel, stride, padding (zeros when absent)
        ntens   u8
        per tensor: rank u8, extents rank*u32, payload prod(extents)*f32
    crc32   u32  over every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .model import LayerGeom, LayerSpec, ModelSpec

MAGIC = b"PCRT"
VERSION = 1
KIND_CODES = {"tensor": 0, "conv": 1, "relu": 2, "maxpool": 3, "globalavgpool": 4, "dense": 5}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}
_RANKS = {"conv": (4, 1), "dense": (2, 1)}


def _pack_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def _pack(header: tuple, layers: list) -> bytes:
    out = [MAGIC, struct.pack("<HH", VERSION, len(layers)), struct.pack("<5H", *header)]
    for kind, geom, tensors in layers:
        g = (geom.kernel, geom.stride, geom.padding) if geom is not None else (0, 0, 0)
        out.append(struct.pack("<B3HB", KIND_CODES[kind], *g, len(tensors)))
        out.extend(_pack_tensor(t) for t in tensors)
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def model_bytes(model: ModelSpec) -> bytes:
    layers = [(l.kind, l.geom, [l.weight, l.bias] if l.weight is not None else [])
              for l in model.layers]
    return _pack((*model.input_shape, model.num_classes, model.superficial_layer), layers)


def save_weights(model: ModelSpec, path) -> None:
    Path(path).write_bytes(model_bytes(model))


def save_tensor(arr: np.ndarray, path) -> None:
    Path(path).write_bytes(_pack((0, 0, 0, 0, 0), [("tensor", None, [np.asarray(arr)])]))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError(f"truncated file at byte {self.pos}")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def tensor(self, where: str) -> np.ndarray:
        (rank,) = self.take("<B")
        shape = self.take(f"<{rank}I") if rank else ()
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if self.pos + nbytes > len(self.data):
            raise FormatError(f"{where}: truncated tensor payload")
        arr = np.frombuffer(self.data, dtype="<f4", count=count, offset=self.pos).reshape(shape)
        self.pos += nbytes
        return arr.astype(np.float32)


def _unpack(data: bytes):
    if len(data) < 4 + 4 + 10 + 4:
        raise FormatError("file too short to be a weight container")
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.pos = 4
    version, nlayers = r.take("<HH")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch (file truncated or corrupt)")
    header = r.take("<5H")
    layers = []
    for i in range(nlayers):
        code, k, s, p, ntens = r.take("<B3HB")
        if code not in CODE_KINDS:
            raise FormatError(f"layer {i}: unknown kind code {code}")
        kind = CODE_KINDS[code]
        tensors = [r.tensor(f"layer {i} ({kind})") for _ in range(ntens)]
        layers.append((kind, (k, s, p), tensors))
    if r.pos != len(body):
        raise FormatError(f"{len(body) - r.pos} trailing bytes after last layer")
    return header, layers


def load_weights(path) -> ModelSpec:
    header, raw = _unpack(Path(path).read_bytes())
    c, h, w, classes, surf = header
    layers = []
    for i, (kind, geom, tensors) in enumerate(raw):
        where = f"layer {i} ({kind})"
        if kind == "tensor":
            raise FormatError(f"{where}: file holds a bare tensor, not a model")
        want = _RANKS.get(kind, ())
        if len(tensors) != len(want):
            raise FormatError(f"{where}: expected {len(want)} tensors, found {len(tensors)}")
        for t, rank in zip(tensors, want):
            if t.ndim != rank:
                raise FormatError(f"{where}: shape table entry {t.shape} has rank {t.ndim}, expected {rank}")
        try:
            g = LayerGeom(*geom) if kind in ("conv", "maxpool") else None
            layers.append(LayerSpec(kind, g, *(tensors or [None, None])))
        except ConfigError as exc:
            raise FormatError(f"{where}: {exc}") from None
    try:
        return ModelSpec(layers, (c, h, w), classes, surf)
    except ConfigError as exc:
        raise FormatError(f"inconsistent shape table: {exc}") from None


def load_tensor(path) -> np.ndarray:
    _, raw = _unpack(Path(path).read_bytes())
    if len(raw) != 1 or raw[0][0] != "tensor" or len(raw[0][2]) != 1:
        raise FormatError("file does not hold a single tensor")
    return raw[0][2][0]
