"""Uniform asymmetric group quantization with contiguous low-bit packing.

Each weight row is cut into fixed-size groups of consecutive columns (the
last group may be short). A group stores unsigned codes at b bits plus one
float32 scale and one unsigned-8 zero point; dequantization is
(code - zero_point) * scale, computed in float32 in exactly that order.

Codes pack LSB-first into a contiguous bit stream: code i occupies stream
bits [i*b, (i+1)*b), and the final byte is zero-padded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from ._util import round_half_away
from .allocate import BitPlan
from .errors import (
    CodeOutOfRange,
    LengthMismatch,
    NonFiniteInput,
    PlanLengthMismatch,
    UnsupportedBitWidth,
)
from .model import QUANTIZABLE, forward_nll

SUPPORTED_BITS = (2, 3, 4, 8)
DEFAULT_GROUP_SIZE = 64


def _check_bits(bits: int) -> int:
    bits = int(bits)
    if bits not in SUPPORTED_BITS:
        raise UnsupportedBitWidth(f"bit width {bits} not in {SUPPORTED_BITS}")
    return bits


def _quantize_block(values: np.ndarray, bits: int):
    """Vectorized core: quantize each row of a (rows, width) block.

    Returns (codes uint8, scales float32, zero_points uint8). Scales are
    rounded to float32 before code computation so encoding and decoding
    agree on the grid.

    The dequant form (code - zero_point) * scale with an unsigned zero
    point can only express grids that contain zero, so the observed range
    is extended to include zero before the scale is derived. Rows whose
    range already straddles zero are unaffected.

    A constant row cannot use the span formula (the span is zero), so it
    stores scale = |c| with code - zero_point = 1 (or all zeros when c = 0),
    which reproduces the constant exactly.
    """
    qmax = (1 << bits) - 1
    raw_min = values.min(axis=1)
    raw_max = values.max(axis=1)
    const = raw_max == raw_min

    vmin = np.minimum(raw_min, 0.0)
    vmax = np.maximum(raw_max, 0.0)

    span = vmax - vmin
    safe_span = np.where(const, 1.0, span)
    scales = (safe_span / qmax).astype(np.float32)
    # a span so small it underflows float32 would divide by zero below
    scales = np.maximum(scales, np.finfo(np.float32).tiny)
    s64 = scales.astype(np.float64)

    zps = np.clip(round_half_away(-vmin / s64), 0, qmax).astype(np.uint8)
    codes = np.clip(
        round_half_away(values / s64[:, None]) + zps[:, None].astype(np.float64),
        0,
        qmax,
    ).astype(np.uint8)

    if const.any():
        c = raw_min[const]
        # c == 0: scale 1, everything zero; c > 0: code 1, zp 0;
        # c < 0: code 0, zp 1. Either way (code - zp) * scale == c exactly.
        zps[const] = (c < 0.0).astype(np.uint8)
        codes[const] = (c > 0.0).astype(np.uint8)[:, None]
        fixed = np.abs(c)
        fixed[c == 0.0] = 1.0
        scales[const] = fixed.astype(np.float32)

    return codes, scales, zps


@dataclass
class QuantGroup:
    """Codes, scale, and zero point for one group of values."""

    codes: np.ndarray  # uint8, each < 2**bits
    scale: float
    zero_point: int
    bits: int


def quantize_group(values: Iterable[float], bits: int) -> QuantGroup:
    """Quantize one group of float values to b-bit unsigned codes.

    Asymmetric range mapping: with [lo, hi] the observed range extended to
    include zero, scale = (hi - lo) / (2^b - 1), zero point z =
    clamp(round(-lo / scale), 0, 2^b - 1), code = clamp(round(v / scale)
    + z, 0, 2^b - 1). Rounding is half away from zero.
    """
    bits = _check_bits(bits)
    vals = np.asarray(list(values) if not isinstance(values, np.ndarray) else values,
                      dtype=np.float64).ravel()
    if vals.size == 0:
        raise LengthMismatch("cannot quantize an empty group")
    if not np.isfinite(vals).all():
        raise NonFiniteInput("group contains non-finite values")
    codes, scales, zps = _quantize_block(vals[None, :], bits)
    return QuantGroup(
        codes=codes[0].copy(),
        scale=float(scales[0]),
        zero_point=int(zps[0]),
        bits=bits,
    )


def dequantize_group(group: QuantGroup) -> np.ndarray:
    """Reconstruct float32 values as (code - zero_point) * scale."""
    diff = group.codes.astype(np.int32) - np.int32(group.zero_point)
    return diff.astype(np.float32) * np.float32(group.scale)


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Pack unsigned codes into a contiguous LSB-first bit stream.

    Code i occupies stream bits [i*bits, (i+1)*bits); bit j of the stream
    lives in byte j // 8 at in-byte position j % 8. The last byte is padded
    with zero bits.
    """
    bits = int(bits)
    if not 1 <= bits <= 8:
        raise UnsupportedBitWidth(f"packing supports 1..8 bits, got {bits}")
    codes = np.asarray(codes)
    if codes.size and int(codes.max()) >= (1 << bits):
        raise CodeOutOfRange(
            f"code {int(codes.max())} does not fit in {bits} bits"
        )
    codes = codes.astype(np.uint8).ravel()
    bit_matrix = (codes[:, None] >> np.arange(bits, dtype=np.uint8)) & 1
    return np.packbits(bit_matrix.ravel(), bitorder="little").tobytes()


def unpack_codes(data: bytes, bits: int, count: int) -> np.ndarray:
    """Inverse of pack_codes: recover count codes from the bit stream."""
    bits = int(bits)
    if not 1 <= bits <= 8:
        raise UnsupportedBitWidth(f"packing supports 1..8 bits, got {bits}")
    expected = (count * bits + 7) // 8
    if len(data) != expected:
        raise LengthMismatch(
            f"packed stream holds {len(data)} bytes, expected {expected} "
            f"for {count} codes at {bits} bits"
        )
    raw = np.frombuffer(data, dtype=np.uint8)
    flat = np.unpackbits(raw, bitorder="little")[: count * bits]
    weights = (1 << np.arange(bits, dtype=np.uint16))
    return (flat.reshape(count, bits) @ weights).astype(np.uint8)


@dataclass
class QuantTensor:
    """One weight matrix stored as packed codes plus per-group metadata.

    Groups run along rows: row r, columns [g*group_size, (g+1)*group_size)
    form group (r, g). Codes for the whole tensor pack row-major into one
    stream, so the packed size is exactly ceil(rows*cols*bits/8) bytes.
    """

    shape: tuple[int, int]
    bits: int
    group_size: int
    packed: bytes
    scales: np.ndarray  # float32, (rows, n_groups)
    zero_points: np.ndarray  # uint8, (rows, n_groups)
    _codes: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_groups(self) -> int:
        return (self.shape[1] + self.group_size - 1) // self.group_size

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]

    @classmethod
    def quantize(cls, weight: np.ndarray, bits: int, group_size: int = DEFAULT_GROUP_SIZE) -> "QuantTensor":
        bits = _check_bits(bits)
        if group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {group_size}")
        w = np.asarray(weight, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("QuantTensor.quantize needs a 2-D weight")
        if not np.isfinite(w).all():
            raise NonFiniteInput("weight contains non-finite values")
        rows, cols = w.shape
        n_groups = (cols + group_size - 1) // group_size
        codes = np.empty((rows, cols), dtype=np.uint8)
        scales = np.empty((rows, n_groups), dtype=np.float32)
        zps = np.empty((rows, n_groups), dtype=np.uint8)
        for g in range(n_groups):
            sl = slice(g * group_size, min((g + 1) * group_size, cols))
            c, s, z = _quantize_block(w[:, sl], bits)
            codes[:, sl] = c
            scales[:, g] = s
            zps[:, g] = z
        return cls(
            shape=(rows, cols),
            bits=bits,
            group_size=group_size,
            packed=pack_codes(codes, bits),
            scales=scales,
            zero_points=zps,
            _codes=codes,
        )

    def codes(self) -> np.ndarray:
        """Unpacked codes, (rows, cols) uint8. Cached after first use."""
        if self._codes is None:
            flat = unpack_codes(self.packed, self.bits, self.size)
            self._codes = flat.reshape(self.shape)
        return self._codes

    def dequantize(self) -> np.ndarray:
        """Materialize the float32 weight, group by group."""
        codes = self.codes()
        out = np.empty(self.shape, dtype=np.float32)
        for g in range(self.n_groups):
            sl = slice(g * self.group_size, min((g + 1) * self.group_size, self.shape[1]))
            diff = codes[:, sl].astype(np.int32) - self.zero_points[:, g : g + 1].astype(np.int32)
            out[:, sl] = diff.astype(np.float32) * self.scales[:, g : g + 1]
        return out

    def right_matmul(self, x: np.ndarray) -> np.ndarray:
        """x @ W.T without materializing the whole float tensor.

        Each column group is dequantized on the fly (same float32 grid as
        dequantize) and its partial product accumulated in float64, so the
        only difference from the materialized product is summation order.
        """
        x = np.asarray(x, dtype=np.float64)
        codes = self.codes()
        out = np.zeros((*x.shape[:-1], self.shape[0]), dtype=np.float64)
        for g in range(self.n_groups):
            sl = slice(g * self.group_size, min((g + 1) * self.group_size, self.shape[1]))
            diff = codes[:, sl].astype(np.int32) - self.zero_points[:, g : g + 1].astype(np.int32)
            block = diff.astype(np.float32) * self.scales[:, g : g + 1]
            out += x[..., sl] @ block.T.astype(np.float64)
        return out


@dataclass
class QuantModel:
    """Quantized checkpoint: packed per-layer linears, float32 everything else.

    Exposes .arch and .tensors just like a float checkpoint, so the shared
    forward engine scores it directly (packed weights run the fused path).
    """

    arch: object
    tensors: dict[str, object]
    plan: BitPlan
    group_size: int

    def layer_bits(self) -> list[int]:
        return list(self.plan.bits)

    def layer_param_count(self, layer: int) -> int:
        return sum(
            self.tensors[f"layer.{layer}.{base}"].size for base in QUANTIZABLE
        )

    def packed_bytes(self) -> int:
        """Total payload bytes of packed code streams."""
        return sum(
            len(t.packed)
            for t in self.tensors.values()
            if isinstance(t, QuantTensor)
        )


def quantize_model(model, plan: BitPlan, group_size: int = DEFAULT_GROUP_SIZE) -> QuantModel:
    """Apply a bit plan to a checkpoint: one uniform bit width per layer.

    Every quantizable matrix of layer i is stored at plan.bits[i]; a 16-bit
    entry keeps the float32 tensor untouched. Embeddings, norms, and the
    output head always pass through unquantized.
    """
    arch = model.arch
    if plan.n_layers != arch.n_layers:
        raise PlanLengthMismatch(plan.n_layers, arch.n_layers)
    if group_size < 1:
        raise ValueError(f"group_size must be >= 1, got {group_size}")
    tensors: dict[str, object] = {}
    quantizable = {
        f"layer.{i}.{base}" for i in range(arch.n_layers) for base in QUANTIZABLE
    }
    for name, w in model.tensors.items():
        if name in quantizable:
            layer = int(name.split(".")[1])
            bits = plan.bits[layer]
            if bits == 16:
                tensors[name] = w.copy()
            else:
                tensors[name] = QuantTensor.quantize(w, bits, group_size)
        else:
            tensors[name] = w.copy()
    return QuantModel(arch=arch, tensors=tensors, plan=plan, group_size=group_size)


def dequantize_model(qmodel: QuantModel):
    """Materialize a float checkpoint from a quantized model."""
    from .model import ModelCheckpoint

    tensors = {}
    for name, t in qmodel.tensors.items():
        tensors[name] = t.dequantize() if isinstance(t, QuantTensor) else t.copy()
    return ModelCheckpoint(arch=qmodel.arch, tensors=tensors)


def qforward_nll(qmodel: QuantModel, tokens, skip=None) -> np.ndarray:
    """Per-position NLL of a quantized model via the fused dequant path."""
    return forward_nll(qmodel, tokens, skip)
