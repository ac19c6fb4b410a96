"""Binary model files.

Layout (all integers little-endian):

    b"MITO"  u32 version  f64 gamma  u32 input_size  u32 channels
    i32 epoch  f64 val_f1  u32 layer_count
    per layer: u32 kind_tag  u32 filters  u32 kh  u32 kw  u32 stride  f64 rate
               u32 ndim  u32 dims[ndim]          (weight shape, ndim=0 if none)
    then, for every parameterized layer in order:
               f32 weights (row-major)  f32 biases
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagic, TruncatedFile, VersionMismatch
from .nn import KINDS, LayerSpec, ModelParams, NetworkSpec, param_shapes

MAGIC = b"MITO"
VERSION = 1


def dumps_model(m: ModelParams) -> bytes:
    spec = m.spec
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IdII", VERSION, spec.gamma, spec.input_size, spec.channels))
    buf.write(struct.pack("<idI", m.epoch, m.val_f1, len(spec.layers)))
    for ls, wt in zip(spec.layers, m.weights):
        buf.write(struct.pack("<IIIIId", KINDS.index(ls.kind), ls.filters, *ls.kernel, ls.stride, ls.rate))
        dims = () if wt is None else wt.shape
        buf.write(struct.pack(f"<I{len(dims)}I", len(dims), *dims))
    for wt, b in zip(m.weights, m.biases):
        if wt is None:
            continue
        buf.write(np.ascontiguousarray(wt, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"model file ends at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads_model(data: bytes) -> ModelParams:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagic("not a model file (bad magic)")
    version, gamma, input_size, channels = r.unpack("<IdII")
    if version != VERSION:
        raise VersionMismatch(f"model format version {version}, expected {VERSION}")
    epoch, val_f1, n_layers = r.unpack("<idI")
    layers, wshapes = [], []
    for _ in range(n_layers):
        tag, filters, kh, kw, stride, rate = r.unpack("<IIIIId")
        if tag >= len(KINDS):
            raise BadMagic(f"unknown layer tag {tag}")
        layers.append(LayerSpec(KINDS[tag], filters, (kh, kw), stride, rate))
        (ndim,) = r.unpack("<I")
        wshapes.append(r.unpack(f"<{ndim}I") if ndim else None)
    spec = NetworkSpec(gamma=gamma, layers=tuple(layers), input_size=input_size, channels=channels)
    expected = param_shapes(spec)
    weights, biases = [], []
    for shapes, stored in zip(expected, wshapes):
        if shapes is None:
            weights.append(None)
            biases.append(None)
            continue
        wshape, bshape = shapes
        if tuple(stored or ()) != tuple(wshape):
            raise TruncatedFile(f"weight shape {stored} does not match layer {wshape}")
        nw, nb = int(np.prod(wshape)), int(np.prod(bshape))
        weights.append(np.frombuffer(r.take(4 * nw), dtype="<f4").reshape(wshape).astype(np.float32))
        biases.append(np.frombuffer(r.take(4 * nb), dtype="<f4").astype(np.float32))
    return ModelParams(spec, weights, biases, epoch=epoch, val_f1=val_f1)


def save_model(m: ModelParams, path) -> None:
    Path(path).write_bytes(dumps_model(m))


def load_model(path) -> ModelParams:
    return loads_model(Path(path).read_bytes())
