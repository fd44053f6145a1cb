"""Packed model file: bit-packed two's-complement weight codes.

Layout (little-endian)::

    b"BMPQ1"
    u32 layer_count
    per layer:
        u16 name_len, name (utf-8)
        u8  bits, u8 ternary flag
        f64 scale                      (alpha* for ternary layers)
        u8  ndim, u32 * ndim shape
        u64 nbytes, packed codes       (bits per code, LSB first, byte padded)
    u32 float_count
    per float tensor:
        u16 name_len, name, u8 ndim, u32 * ndim shape, f64 * prod(shape)
    u64 json_len, metadata JSON (utf-8)

Float tensors carry everything that stays unquantized (biases, batchnorm
state, PACT clipping levels) so an imported model evaluates identically.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .errors import FormatError
from .models import ModelSpec
from .network import Network
from .quant import QuantizedTensor, bits_to_codes, codes_to_bits

MAGIC = b"BMPQ1"


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Pack signed codes into ``bits``-wide two's-complement fields."""
    table = codes_to_bits(codes, bits)[:, ::-1]  # LSB first
    return np.packbits(table.ravel(), bitorder="little").tobytes()


def unpack_codes(buf: bytes, bits: int, count: int) -> np.ndarray:
    flat = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), count=count * bits, bitorder="little")
    return bits_to_codes(flat.reshape(count, bits)[:, ::-1])


@dataclass
class PackedModel:
    layers: Dict[str, QuantizedTensor]
    floats: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def put(self, fmt: str, *values) -> None:
        self.buf.write(struct.pack("<" + fmt, *values))

    def name(self, s: str) -> None:
        raw = s.encode()
        self.put("H", len(raw))
        self.buf.write(raw)

    def shape(self, shape) -> None:
        self.put("B", len(shape))
        for d in shape:
            self.put("I", d)


def pack_model(model: PackedModel) -> bytes:
    w = _Writer()
    w.buf.write(MAGIC)
    w.put("I", len(model.layers))
    for name, qt in model.layers.items():
        w.name(name)
        w.put("BBd", qt.bits, qt.mode == "ternary", qt.scale)
        w.shape(qt.codes.shape)
        payload = pack_codes(qt.codes, qt.bits)
        w.put("Q", len(payload))
        w.buf.write(payload)
    w.put("I", len(model.floats))
    for name, arr in model.floats.items():
        arr = np.asarray(arr, dtype=np.float64)
        w.name(name)
        w.shape(arr.shape)
        w.buf.write(arr.astype("<f8").tobytes())
    meta = json.dumps(model.metadata, sort_keys=True).encode()
    w.put("Q", len(meta))
    w.buf.write(meta)
    return w.buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file: need {n} bytes", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def get(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.get("H")
        return self.take(n).decode()

    def shape(self) -> tuple:
        (ndim,) = self.get("B")
        return tuple(self.get("I")[0] for _ in range(ndim))


def unpack_model(data: bytes) -> PackedModel:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError("bad magic, not a packed model file", 0)
    (count,) = r.get("I")
    layers = {}
    for _ in range(count):
        name = r.name()
        bits, ternary, scale = r.get("BBd")
        shape = r.shape()
        (nbytes,) = r.get("Q")
        n = int(np.prod(shape))
        if nbytes != (n * bits + 7) // 8:
            raise FormatError(f"layer {name}: {nbytes} payload bytes do not match "
                              f"{n} codes at {bits} bits", r.pos)
        codes = unpack_codes(r.take(nbytes), bits, n).reshape(shape)
        layers[name] = QuantizedTensor(codes, scale, bits, "ternary" if ternary else "symmetric")
    (fcount,) = r.get("I")
    floats = {}
    for _ in range(fcount):
        name = r.name()
        shape = r.shape()
        n = int(np.prod(shape))
        floats[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    (mlen,) = r.get("Q")
    metadata = json.loads(r.take(mlen).decode())
    if r.pos != len(data):
        raise FormatError("trailing bytes after metadata", r.pos)
    return PackedModel(layers, floats, metadata)


def save_packed(path, model: PackedModel) -> None:
    with open(path, "wb") as fh:
        fh.write(pack_model(model))


def load_packed(path) -> PackedModel:
    with open(path, "rb") as fh:
        return unpack_model(fh.read())


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def export_network(network, metadata: dict) -> PackedModel:
    """Snapshot a :class:`bmpq.network.Network` at its current widths."""
    floats = {k: v for k, v in network.state_arrays().items() if not k.endswith(".weight")}
    meta = dict(metadata)
    meta.setdefault("spec", network.spec.to_dict())
    meta.setdefault("bits", dict(network.bits))
    return PackedModel(network.quantized_weights(), floats, meta)


def import_network(packed: PackedModel):
    """Rebuild a network whose forward pass uses the stored codes.

    Returns ``(network, frozen)``; pass ``frozen`` to ``Network.predict``.
    Shadow weights are set to the dequantized values.
    """
    net = Network(ModelSpec.from_dict(packed.metadata["spec"]))
    net.set_bits({name: qt.bits for name, qt in packed.layers.items()})
    net.load_state_arrays(packed.floats)
    for name, qt in packed.layers.items():
        net.weights[name].data = qt.dequantize()
    return net, dict(packed.layers)
