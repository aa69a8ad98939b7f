"""The ``.dfq`` packed model format, its forward pass, and storage/latency metrics.

Layout (all multi-byte fields little-endian)::

    header   magic "DFQ1", u16 version, u16 layer count, u32 input width,
             u16 block count, then per block: u16 layer count + u16 indices
    layer    u16 name length + UTF-8 name, u8 bits, u8 granularity, u8 relu,
             u32 C_out, u32 C_in,
             u8 activation flag [+ u8 bits, f32 scale, u16 zero point],
             f32 bias[C_out],
             bits < 32:  f32 scale[C_out], u16 zero point[C_out],
                         restore bitmap[ceil(C_out / 8)] (channel i -> byte i//8, bit i%8),
                         payload: codes of unrestored rows, row-major, packed
                         least-significant bit first (4-bit codes: earlier value
                         in the low nibble; 8-bit codes: one byte each),
                         f32 rows[restored count, C_in]
             bits >= 32: f32 weight[C_out, C_in]
"""

from __future__ import annotations

import io
import struct
import time
from dataclasses import dataclass
from typing import List, NamedTuple, Optional

import numpy as np

from .errors import ContractError, FormatError
from .fakequant import DISABLED_BITS, PER_CHANNEL, PER_TENSOR, QParams, QuantizedModel, dequantize, fake_quantize
from .toy import FAKE, REAL, Dense, ToyDetector, dense_forward

MAGIC = b"DFQ1"
VERSION = 1
_GRAN = {PER_TENSOR: 0, PER_CHANNEL: 1}
_GRAN_INV = {v: k for k, v in _GRAN.items()}


def pack_bits(values, bits) -> bytes:
    """Concatenate ``bits``-wide unsigned codes, least-significant bit first."""
    v = np.asarray(values, dtype=np.int64).ravel()
    if v.size and (v.min() < 0 or v.max() >= 1 << bits):
        raise ContractError(f"values outside [0, {(1 << bits) - 1}]")
    planes = (v[:, None] >> np.arange(bits)) & 1
    return np.packbits(planes.astype(np.uint8).ravel(), bitorder="little").tobytes()


def unpack_bits(data: bytes, bits, count) -> np.ndarray:
    raw = np.frombuffer(data, dtype=np.uint8)
    if raw.size != packed_length(count, bits):
        raise FormatError(f"payload has {raw.size} bytes, expected {packed_length(count, bits)}")
    planes = np.unpackbits(raw, bitorder="little", count=count * bits).reshape(count, bits)
    return planes.astype(np.int64) @ (1 << np.arange(bits, dtype=np.int64))


def packed_length(count, bits):
    return (count * bits + 7) // 8


def pack_nibbles(values) -> bytes:
    """Two 4-bit values per byte, earlier value in the low nibble."""
    return pack_bits(values, 4)


@dataclass
class PackedLayer:
    name: str
    bits: int
    granularity: str
    relu: bool
    shape: tuple
    bias: np.ndarray
    act: Optional[QParams] = None
    weight: Optional[np.ndarray] = None  # full-precision layers only
    qparams: Optional[QParams] = None
    restored: Optional[np.ndarray] = None
    codes: Optional[np.ndarray] = None  # (unrestored rows, C_in)
    restored_rows: Optional[np.ndarray] = None

    @property
    def quantized(self):
        return self.bits < DISABLED_BITS

    def dequantized_weight(self) -> np.ndarray:
        """Full weight matrix in float64, same arithmetic as the fake-quant model."""
        if not self.quantized:
            return self.weight
        c_out, c_in = self.shape
        grid = np.zeros((c_out, c_in), dtype=np.int64)
        grid[~self.restored] = self.codes
        w = dequantize(grid, self.qparams)
        w[self.restored] = self.restored_rows
        return w

    @property
    def payload_bytes(self):
        return packed_length(self.codes.size, self.bits) if self.quantized else 0


@dataclass
class PackedModel:
    layers: List[PackedLayer]
    blocks: List[List[int]]
    n_inputs: int

    @classmethod
    def from_model(cls, model: QuantizedModel) -> "PackedModel":
        layers = []
        for layer in model.layers:
            c_out, c_in = layer.weight.shape
            act = layer.act_fq.qparams if layer.act_fq.enabled else None
            common = dict(
                name=layer.name,
                relu=bool(layer.relu),
                shape=(c_out, c_in),
                bias=_f32(layer.bias, "bias of " + layer.name),
                act=act,
            )
            if not layer.quantized:
                layers.append(
                    PackedLayer(bits=DISABLED_BITS, granularity=PER_TENSOR, weight=_f32(layer.weight, layer.name), **common)
                )
                continue
            if layer.codes is None:
                raise ContractError(f"layer {layer.name} has un-hardened rounding variables")
            q = layer.weight_q
            _f32(q.scale, "weight scale of " + layer.name)
            if act is not None:
                _f32(act.scale, "activation scale of " + layer.name)
            if q.granularity != PER_CHANNEL:
                q = QParams(np.full(c_out, float(q.scale)), np.full(c_out, int(q.zero_point)), q.bits, PER_CHANNEL)
            restored = np.asarray(layer.restored, dtype=bool).copy()
            layers.append(
                PackedLayer(
                    bits=int(q.bits),
                    granularity=PER_CHANNEL,
                    qparams=q,
                    restored=restored,
                    codes=np.asarray(layer.codes, dtype=np.int64)[~restored],
                    restored_rows=_f32(layer.weight[restored], layer.name),
                    **common,
                )
            )
        return cls(layers, [list(b) for b in model.blocks], model.layers[0].weight.shape[1])

    # serialization -------------------------------------------------------

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(MAGIC)
        out.write(struct.pack("<HHIH", VERSION, len(self.layers), self.n_inputs, len(self.blocks)))
        for block in self.blocks:
            out.write(struct.pack(f"<H{len(block)}H", len(block), *block))
        for layer in self.layers:
            name = layer.name.encode("utf-8")
            c_out, c_in = layer.shape
            out.write(struct.pack("<H", len(name)) + name)
            out.write(struct.pack("<BBBII", layer.bits, _GRAN[layer.granularity], layer.relu, c_out, c_in))
            if layer.act is None:
                out.write(struct.pack("<B", 0))
            else:
                out.write(struct.pack("<BBfH", 1, layer.act.bits, float(layer.act.scale), int(layer.act.zero_point)))
            out.write(layer.bias.astype("<f4").tobytes())
            if not layer.quantized:
                out.write(layer.weight.astype("<f4").tobytes())
                continue
            out.write(layer.qparams.scale.astype("<f4").tobytes())
            out.write(layer.qparams.zero_point.astype("<u2").tobytes())
            out.write(np.packbits(layer.restored, bitorder="little").tobytes())
            out.write(pack_bits(layer.codes, layer.bits))
            out.write(layer.restored_rows.astype("<f4").tobytes())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "PackedModel":
        r = _Reader(data)
        if r.take(4) != MAGIC:
            raise FormatError("bad magic; not a .dfq file")
        version, n_layers, n_inputs, n_blocks = r.unpack("<HHIH")
        if version != VERSION:
            raise FormatError(f"unsupported .dfq version {version}")
        blocks = []
        for _ in range(n_blocks):
            (count,) = r.unpack("<H")
            blocks.append(list(r.unpack(f"<{count}H")))
        layers = []
        for _ in range(n_layers):
            (name_len,) = r.unpack("<H")
            name = r.take(name_len).decode("utf-8")
            bits, gran, relu, c_out, c_in = r.unpack("<BBBII")
            if gran not in _GRAN_INV:
                raise FormatError(f"unknown granularity code {gran}")
            (has_act,) = r.unpack("<B")
            act = None
            if has_act:
                a_bits, a_scale, a_zero = r.unpack("<BfH")
                act = _qparams(float(a_scale), int(a_zero), a_bits, PER_TENSOR)
            bias = r.array("<f4", c_out)
            common = dict(name=name, relu=bool(relu), shape=(c_out, c_in), bias=bias, act=act)
            if bits >= DISABLED_BITS:
                layers.append(
                    PackedLayer(bits=bits, granularity=_GRAN_INV[gran], weight=r.array("<f4", c_out * c_in).reshape(c_out, c_in), **common)
                )
                continue
            scales = r.array("<f4", c_out)
            zeros = r.array("<u2", c_out).astype(np.int64)
            restored = np.unpackbits(np.frombuffer(r.take((c_out + 7) // 8), dtype=np.uint8), bitorder="little", count=c_out).astype(bool)
            n_rest = int(restored.sum())
            count = (c_out - n_rest) * c_in
            codes = unpack_bits(r.take(packed_length(count, bits)), bits, count).reshape(c_out - n_rest, c_in)
            rows = r.array("<f4", n_rest * c_in).reshape(n_rest, c_in)
            q = _qparams(scales, zeros, bits, PER_CHANNEL)
            layers.append(
                PackedLayer(
                    bits=bits, granularity=_GRAN_INV[gran], qparams=q, restored=restored, codes=codes, restored_rows=rows, **common
                )
            )
        if not r.done:
            raise FormatError(f"{r.remaining} trailing bytes after the last layer")
        return cls(layers, blocks, n_inputs)

    # inference -----------------------------------------------------------

    def forward(self, X) -> np.ndarray:
        h = np.asarray(X, dtype=np.float64)
        h = h.reshape(h.shape[0], -1) if h.ndim != 1 else h[None, :]
        if h.shape[1] != self.n_inputs:
            raise ContractError(f"expected {self.n_inputs} input features, got {h.shape[1]}")
        for layer in self.layers:
            if layer.act is not None:
                h = fake_quantize(h, layer.act)
            h = dense_forward(h, layer.dequantized_weight(), layer.bias, layer.relu)
        return h

    def decision_function(self, X):
        logits = self.forward(X)
        return logits[:, 1] - logits[:, 0]

    def predict(self, X):
        return np.argmax(self.forward(X), axis=1)

    def restored_channels(self):
        return sum(int(l.restored.sum()) for l in self.layers if l.quantized)

    def breakdown(self) -> dict:
        """Serialized bytes by category; the values sum to the file length."""
        out = dict(header=len(MAGIC) + 10, structure=0, biases=0, activation=0, scales=0, zero_points=0,
                   bitmaps=0, payload=0, restored_rows=0, fp32_weights=0)
        out["structure"] += sum(2 + 2 * len(b) for b in self.blocks)
        for l in self.layers:
            c_out, c_in = l.shape
            out["structure"] += 2 + len(l.name.encode("utf-8")) + 11
            out["activation"] += 8 if l.act is not None else 1
            out["biases"] += 4 * c_out
            if not l.quantized:
                out["fp32_weights"] += 4 * c_out * c_in
                continue
            out["scales"] += 4 * c_out
            out["zero_points"] += 2 * c_out
            out["bitmaps"] += (c_out + 7) // 8
            out["payload"] += l.payload_bytes
            out["restored_rows"] += 4 * l.restored_rows.size
        return out

    def describe(self) -> str:
        rows = [f"{'idx':>3} {'layer':<10} {'shape':>9} {'bits':>4} {'restored':>8} {'payload':>8} {'act':>4}"]
        for i, l in enumerate(self.layers):
            shape = f"{l.shape[0]}x{l.shape[1]}"
            rest = int(l.restored.sum()) if l.quantized else 0
            bits = "fp32" if not l.quantized else str(l.bits)
            act = str(l.act.bits) if l.act is not None else "-"
            rows.append(f"{i:>3} {l.name:<10} {shape:>9} {bits:>4} {rest:>8} {l.payload_bytes:>8} {act:>4}")
        parts = self.breakdown()
        rows.append("")
        rows.append(f"total {sum(parts.values())} bytes: " + ", ".join(f"{k} {v}" for k, v in parts.items() if v))
        return "\n".join(rows) + "\n"


def _f32(a, what):
    a = np.asarray(a, dtype=np.float64)
    f = a.astype(np.float32)
    if not np.array_equal(f.astype(np.float64), a):
        raise ContractError(f"{what} is not representable in single precision")
    return f.astype(np.float64)


def _qparams(scale, zero, bits, granularity):
    try:
        return QParams(scale, zero, bits, granularity)
    except ContractError as exc:
        raise FormatError(f"invalid quantization parameters: {exc}") from None


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated .dfq file")
        chunk = bytes(self.data[self.pos : self.pos + n])
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count):
        return np.frombuffer(self.take(np.dtype(dtype).itemsize * count), dtype=dtype).astype(np.float64)

    @property
    def remaining(self):
        return len(self.data) - self.pos

    @property
    def done(self):
        return self.remaining == 0


def pack(model: QuantizedModel) -> bytes:
    return PackedModel.from_model(model).to_bytes()


def unpack(data: bytes) -> PackedModel:
    return PackedModel.from_bytes(data)


def save(model: QuantizedModel, path) -> int:
    data = pack(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load(path) -> PackedModel:
    with open(path, "rb") as fh:
        return unpack(fh.read())


def packed_forward(packed, X) -> np.ndarray:
    if isinstance(packed, (bytes, bytearray)):
        packed = unpack(bytes(packed))
    return packed.forward(X)


def to_detector(packed: PackedModel) -> ToyDetector:
    """Rebuild a fitted :class:`ToyDetector` from an all-fp32 packed model."""
    if any(l.quantized for l in packed.layers):
        raise ContractError("only a full-precision .dfq can be turned back into a detector")
    blocks = [list(b) for b in packed.blocks]
    width = packed.layers[0].shape[0]
    det = ToyDetector(width=width, n_blocks=len(blocks), layers_per_block=len(blocks[0]) if blocks else 1)
    det.layers_ = [Dense(l.weight.copy(), l.bias.copy(), l.relu, l.name) for l in packed.layers]
    det.blocks_ = blocks
    det.classes_ = np.array([REAL, FAKE])
    det.n_features_in_ = packed.n_inputs
    det.history_ = []
    return det


def fp_reference_bytes(detector) -> int:
    """Size of the full-precision model written in the same format (every layer fp32)."""
    return len(pack(QuantizedModel.from_detector(detector)))


class Metrics(NamedTuple):
    storage_cost_bytes: int
    compression_rate: float
    latency_ms: Optional[float] = None
    latency_sd_ms: Optional[float] = None

    @property
    def size_fraction(self):
        return 1.0 - self.compression_rate


def compression_rate(cost, reference) -> float:
    """``1 - cost / reference``; works in any unit as long as both agree."""
    if not reference > 0:
        raise ContractError("reference size must be positive")
    return 1.0 - cost / reference


def storage_and_compression(packed, fp_reference) -> Metrics:
    size = len(packed) if isinstance(packed, (bytes, bytearray)) else len(packed.to_bytes())
    return Metrics(size, compression_rate(size, fp_reference))


def latency(packed: PackedModel, X, warmup=10, runs=100):
    """Mean and standard deviation (ms) of single-image forwards."""
    if runs < 1:
        raise ContractError("need at least one timed run")
    X = np.asarray(X, dtype=np.float64)
    X = X.reshape(X.shape[0], -1)
    for i in range(warmup):
        packed.forward(X[i % len(X)][None])
    times = []
    for i in range(runs):
        x = X[i % len(X)][None]
        start = time.perf_counter()
        packed.forward(x)
        times.append((time.perf_counter() - start) * 1e3)
    return float(np.mean(times)), float(np.std(times))
