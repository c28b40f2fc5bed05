"""Model compression: magnitude pruning, affine 8-bit quantization, and the
canonical binary serialization used for every exchanged model.

Serialized layout (all integers little-endian):

  header (16 bytes): magic b"SPFL" | format version u32 | kind u32 | tensor count u32
  per tensor (8 bytes): rows u32 | cols u32  (cols == 0 marks a vector)
  payload, per kind and tensor, in order W0, b0, W1, b1, ...:
    dense            : values as f32 (4 bytes each)
    quantized        : scale f32 | zero_point u8 | values as u8
    sparse           : keep-bitmap (1 bit/position, MSB-first, byte-padded
                       per tensor) | surviving values as f32
    sparse+quantized : keep-bitmap | scale f32 | zero_point u8 | surviving
                       values as u8

Bias vectors are never pruned; under the sparse kinds they carry an all-ones
bitmap.  Quantized tensors are dequantized as (q - zero_point) * scale.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .neuralnet import ParameterSet

KINDS = ("dense", "sparse", "quantized", "sparse+quantized")
_KIND_CODES = {kind: i for i, kind in enumerate(KINDS)}
MAGIC = b"SPFL"
FORMAT_VERSION = 1
HEADER_BYTES = 16
SHAPE_BYTES_PER_TENSOR = 8


@dataclass(frozen=True)
class CompressionStrategy:
    """What to do to a model before it goes on the wire: kind + sparsity psi."""

    kind: str
    psi: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown compression kind {self.kind!r}, expected one of {KINDS}")
        if not (0.0 <= self.psi <= 1.0):
            raise ValueError(f"psi must be in [0, 1], got {self.psi}")

    @property
    def prunes(self) -> bool:
        return self.kind in ("sparse", "sparse+quantized")

    @property
    def quantizes(self) -> bool:
        return self.kind in ("quantized", "sparse+quantized")


@dataclass
class SparseMask:
    """Per-layer keep masks (1 = kept) congruent to the weight matrices."""

    layers: list[np.ndarray]

    def __post_init__(self) -> None:
        self.layers = [np.asarray(m, dtype=np.uint8) for m in self.layers]
        for m in self.layers:
            if m.ndim != 2:
                raise ValueError("mask layers must be 2-d")
            bad = (m != 0) & (m != 1)
            if bad.any():
                raise ValueError("mask entries must be 0 or 1")

    def kept_counts(self) -> list[int]:
        return [int(m.sum()) for m in self.layers]

    def copy(self) -> "SparseMask":
        return SparseMask([m.copy() for m in self.layers])


@dataclass
class QuantizedTensor:
    """One tensor quantized to u8 with an affine (scale, zero_point) map."""

    scale: float
    zero_point: int
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.uint8)
        if not (0 <= self.zero_point <= 255):
            raise ValueError(f"zero_point must be in [0, 255], got {self.zero_point}")
        if not np.isfinite(self.scale):
            raise ValueError("scale must be finite")


@dataclass
class QuantizedParameterSet:
    """Quantized tensors in serialization order W0, b0, W1, b1, ..."""

    tensors: list[QuantizedTensor]

    def __post_init__(self) -> None:
        if len(self.tensors) % 2 != 0:
            raise ValueError("expected an even tensor count (weight/bias pairs)")


@dataclass
class CompressedModel:
    """A model in one of the four wire kinds; payload fields match the kind."""

    kind: str
    params: ParameterSet | None = None
    mask: SparseMask | None = None
    qparams: QuantizedParameterSet | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown compression kind {self.kind!r}")
        dense_payload = self.params is not None
        quant_payload = self.qparams is not None
        masked = self.mask is not None
        expectations = {
            "dense": (True, False, False),
            "sparse": (True, False, True),
            "quantized": (False, True, False),
            "sparse+quantized": (False, True, True),
        }
        if (dense_payload, quant_payload, masked) != expectations[self.kind]:
            raise ValueError(f"payload does not match kind {self.kind!r}")

    @property
    def num_layers(self) -> int:
        if self.params is not None:
            return self.params.num_layers
        return len(self.qparams.tensors) // 2


def _round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest with ties away from zero (np.round ties to even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _floor_count(psi: float, n: int) -> int:
    # floor(psi * n) in real arithmetic; the 1e-9 nudge absorbs float error in
    # products like 0.3 * 1000 that land a hair below the true integer.
    return int(math.floor(psi * n + 1e-9))


def prune_magnitude(params: ParameterSet, psi: float) -> tuple[ParameterSet, SparseMask]:
    """Zero the floor(psi * n) smallest-magnitude weights of each layer.

    Ties in |w| are broken by (row, col) order with the lower index pruned
    first.  Biases are untouched.  Returns the pruned copy and the keep mask.
    """
    if not (0.0 <= psi <= 1.0):
        raise ValueError(f"psi must be in [0, 1], got {psi}")
    pruned = params.copy()
    mask_layers = []
    for w in pruned.weights:
        k = _floor_count(psi, w.size)
        mask = np.ones(w.size, dtype=np.uint8)
        if k > 0:
            # stable sort on |w| keeps ties in flat (row-major) order, so the
            # first k entries prune lower (row, col) indices first
            order = np.argsort(np.abs(w).ravel(), kind="stable")
            mask[order[:k]] = 0
        mask = mask.reshape(w.shape)
        w *= mask
        mask_layers.append(mask)
    return pruned, SparseMask(mask_layers)


def _quantize_tensor(t: np.ndarray) -> QuantizedTensor:
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        return QuantizedTensor(1.0, 0, np.zeros(t.shape, dtype=np.uint8))
    if not np.isfinite(t).all():
        raise ValueError("cannot quantize non-finite values")
    lo = float(t.min())
    hi = float(t.max())
    scale = 1.0 if hi == lo else (hi - lo) / 255.0
    zero_point = int(min(255.0, max(0.0, float(_round_half_away(-lo / scale)))))
    q = np.clip(_round_half_away(t / scale) + zero_point, 0, 255).astype(np.uint8)
    return QuantizedTensor(scale, zero_point, q)


def _dequantize_tensor(qt: QuantizedTensor) -> np.ndarray:
    return (qt.values.astype(np.float64) - qt.zero_point) * qt.scale


def quantize_affine(params: ParameterSet) -> QuantizedParameterSet:
    """Quantize every tensor (weights and biases) to u8 independently."""
    tensors = []
    for w, b in zip(params.weights, params.biases):
        tensors.append(_quantize_tensor(w))
        tensors.append(_quantize_tensor(b))
    return QuantizedParameterSet(tensors)


def dequantize(qparams: QuantizedParameterSet) -> ParameterSet:
    """Map u8 tensors back to float64 parameters."""
    weights, biases = [], []
    for i in range(0, len(qparams.tensors), 2):
        weights.append(_dequantize_tensor(qparams.tensors[i]))
        biases.append(_dequantize_tensor(qparams.tensors[i + 1]))
    return ParameterSet(weights, biases)


def compress(params: ParameterSet, strategy: CompressionStrategy) -> CompressedModel:
    """Apply the strategy: prune first (if sparse), then quantize (if quantized).

    For sparse+quantized the pruned tensor (zeros included) is what gets
    quantized, which puts 0 exactly on the quantization grid, so pruned
    positions dequantize back to exactly 0.
    """
    if strategy.kind == "dense":
        return CompressedModel("dense", params=params.copy())
    if strategy.kind == "sparse":
        pruned, mask = prune_magnitude(params, strategy.psi)
        return CompressedModel("sparse", params=pruned, mask=mask)
    if strategy.kind == "quantized":
        return CompressedModel("quantized", qparams=quantize_affine(params))
    pruned, mask = prune_magnitude(params, strategy.psi)
    return CompressedModel("sparse+quantized", qparams=quantize_affine(pruned), mask=mask)


def decompress(model: CompressedModel) -> ParameterSet:
    """Reconstruct float64 parameters from any compressed kind."""
    if model.params is not None:
        return model.params.copy()
    return dequantize(model.qparams)


def nonzero_macs(model: ParameterSet | CompressedModel) -> int:
    """Count of nonzero weights (bias adds excluded): the per-sample MAC proxy."""
    params = model if isinstance(model, ParameterSet) else decompress(model)
    return int(sum(int(np.count_nonzero(w)) for w in params.weights))


# ---- serialization ----


def _tensor_shapes(model: CompressedModel) -> list[tuple[int, int]]:
    """(rows, cols) per tensor in order W0, b0, ...; cols == 0 for vectors."""
    shapes = []
    if model.params is not None:
        for w, b in zip(model.params.weights, model.params.biases):
            shapes.append((w.shape[0], w.shape[1]))
            shapes.append((b.shape[0], 0))
    else:
        for qt in model.qparams.tensors:
            if qt.values.ndim == 2:
                shapes.append((qt.values.shape[0], qt.values.shape[1]))
            else:
                shapes.append((qt.values.shape[0], 0))
    return shapes


def _bitmap_lengths(model: CompressedModel) -> list[int]:
    """Bitmap byte count per tensor (sparse kinds only)."""
    out = []
    for rows, cols in _tensor_shapes(model):
        n = rows * cols if cols else rows
        out.append((n + 7) // 8)
    return out


def _kept_per_tensor(model: CompressedModel) -> list[int]:
    """Surviving value count per tensor; biases always survive whole."""
    kept = []
    shapes = _tensor_shapes(model)
    for i, (rows, cols) in enumerate(shapes):
        layer = i // 2
        if cols:
            kept.append(int(model.mask.layers[layer].sum()))
        else:
            kept.append(rows)
    return kept


def serialized_size(model: CompressedModel) -> int:
    """Exact byte length of to_bytes(model), computed arithmetically."""
    shapes = _tensor_shapes(model)
    size = HEADER_BYTES + SHAPE_BYTES_PER_TENSOR * len(shapes)
    counts = [rows * cols if cols else rows for rows, cols in shapes]
    if model.kind == "dense":
        size += 4 * sum(counts)
    elif model.kind == "quantized":
        size += sum(counts) + 5 * len(shapes)
    elif model.kind == "sparse":
        size += sum(_bitmap_lengths(model)) + 4 * sum(_kept_per_tensor(model))
    else:
        size += sum(_bitmap_lengths(model)) + sum(_kept_per_tensor(model)) + 5 * len(shapes)
    return size


def payload_size(model: CompressedModel) -> int:
    """Serialized size minus the header and per-tensor shape metadata."""
    n_tensors = len(_tensor_shapes(model))
    return serialized_size(model) - HEADER_BYTES - SHAPE_BYTES_PER_TENSOR * n_tensors


def _iter_tensors(model: CompressedModel):
    """Yield (flat float values or QuantizedTensor, keep-bits or None) pairs."""
    for i in range(model.num_layers):
        if model.params is not None:
            w_val, b_val = model.params.weights[i], model.params.biases[i]
        else:
            w_val, b_val = model.qparams.tensors[2 * i], model.qparams.tensors[2 * i + 1]
        if model.mask is not None:
            w_bits = model.mask.layers[i].ravel().astype(bool)
            n_b = (
                model.params.biases[i].size
                if model.params is not None
                else model.qparams.tensors[2 * i + 1].values.size
            )
            b_bits = np.ones(n_b, dtype=bool)
        else:
            w_bits = b_bits = None
        yield w_val, w_bits
        yield b_val, b_bits


def to_bytes(model: CompressedModel) -> bytes:
    """Serialize to the canonical byte format described in the module docstring."""
    chunks = [
        struct.pack(
            "<4sIII",
            MAGIC,
            FORMAT_VERSION,
            _KIND_CODES[model.kind],
            2 * model.num_layers,
        )
    ]
    for value, bits in _iter_tensors(model):
        arr = value.values if isinstance(value, QuantizedTensor) else np.asarray(value)
        if arr.ndim == 2:
            chunks.append(struct.pack("<II", arr.shape[0], arr.shape[1]))
        else:
            chunks.append(struct.pack("<II", arr.shape[0], 0))
        flat = arr.ravel()
        if bits is not None:
            chunks.append(np.packbits(bits).tobytes())
            flat = flat[bits]
        if isinstance(value, QuantizedTensor):
            chunks.append(struct.pack("<fB", np.float32(value.scale), value.zero_point))
            chunks.append(flat.astype(np.uint8).tobytes())
        else:
            chunks.append(flat.astype("<f4").tobytes())
    return b"".join(chunks)


class SerializationError(ValueError):
    pass


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise SerializationError("truncated payload")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def from_bytes(buf: bytes) -> CompressedModel:
    """Parse the canonical byte format back into a CompressedModel.

    Values serialized as f32 come back as float64 holding f32-representable
    numbers, which is exactly what a receiving device would see.
    """
    r = _Reader(buf)
    magic, version, kind_code, n_tensors = struct.unpack("<4sIII", r.take(16))
    if magic != MAGIC:
        raise SerializationError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise SerializationError(f"unsupported format version {version}")
    if kind_code >= len(KINDS):
        raise SerializationError(f"unknown kind code {kind_code}")
    kind = KINDS[kind_code]
    if n_tensors % 2 != 0:
        raise SerializationError(f"tensor count {n_tensors} is not a weight/bias pairing")

    sparse = kind in ("sparse", "sparse+quantized")
    quantized = kind in ("quantized", "sparse+quantized")
    weights: list[np.ndarray] = []
    biases: list[np.ndarray] = []
    qtensors: list[QuantizedTensor] = []
    mask_layers: list[np.ndarray] = []

    for t in range(n_tensors):
        rows, cols = struct.unpack("<II", r.take(8))
        is_weight = t % 2 == 0
        if is_weight and cols == 0:
            raise SerializationError(f"tensor {t}: expected a matrix, got a vector")
        if not is_weight and cols != 0:
            raise SerializationError(f"tensor {t}: expected a vector, got a matrix")
        n = rows * cols if cols else rows
        shape = (rows, cols) if cols else (rows,)

        bits = None
        if sparse:
            raw = np.frombuffer(r.take((n + 7) // 8), dtype=np.uint8)
            bits = np.unpackbits(raw)[:n].astype(bool)
            if is_weight:
                mask_layers.append(bits.astype(np.uint8).reshape(shape))
            elif not bits.all():
                raise SerializationError(f"tensor {t}: bias bitmap must be all ones")
        if quantized:
            scale, zero_point = struct.unpack("<fB", r.take(5))
            kept = int(bits.sum()) if bits is not None else n
            vals = np.frombuffer(r.take(kept), dtype=np.uint8)
            full = np.full(n, zero_point, dtype=np.uint8)
            full[bits if bits is not None else slice(None)] = vals
            qtensors.append(QuantizedTensor(float(scale), int(zero_point), full.reshape(shape)))
        else:
            kept = int(bits.sum()) if bits is not None else n
            vals = np.frombuffer(r.take(4 * kept), dtype="<f4").astype(np.float64)
            full = np.zeros(n, dtype=np.float64)
            full[bits if bits is not None else slice(None)] = vals
            (weights if is_weight else biases).append(full.reshape(shape))

    if r.pos != len(buf):
        raise SerializationError(f"{len(buf) - r.pos} trailing bytes after payload")

    mask = SparseMask(mask_layers) if sparse else None
    if quantized:
        return CompressedModel(kind, qparams=QuantizedParameterSet(qtensors), mask=mask)
    return CompressedModel(kind, params=ParameterSet(weights, biases), mask=mask)


def encode_wire(
    params: ParameterSet, strategy: CompressionStrategy, mask: SparseMask | None
) -> CompressedModel:
    """Wrap already-trained parameters in the strategy's wire kind.

    Unlike compress() this never re-prunes: masked training has kept pruned
    positions at exactly zero, so the round's existing mask is reused.
    Quantization is applied fresh (training de-quantizes the values).
    """
    if strategy.prunes and mask is None:
        raise ValueError(f"kind {strategy.kind!r} requires the round's prune mask")
    if strategy.kind == "dense":
        return CompressedModel("dense", params=params.copy())
    if strategy.kind == "sparse":
        return CompressedModel("sparse", params=params.copy(), mask=mask.copy())
    if strategy.kind == "quantized":
        return CompressedModel("quantized", qparams=quantize_affine(params))
    return CompressedModel("sparse+quantized", qparams=quantize_affine(params), mask=mask.copy())
