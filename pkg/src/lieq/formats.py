"""Binary artifact formats: checkpoint, token corpus, quantized model.

All three share the same envelope idea: an ASCII magic string, a little-endian
uint32 format version, then format-specific content. Checkpoint and quantized
model use a JSON header describing the architecture and a tensor index,
followed by a 64-byte-aligned binary payload and a trailing CRC32 of the
payload bytes (alignment padding excluded). The corpus is a flat stream of
length-prefixed uint32 token records.

All multi-byte integers are little-endian; tensor data is little-endian
float32.
"""

from __future__ import annotations

import json
import struct
import zlib
from typing import BinaryIO

import numpy as np

from .allocate import BitPlan
from .errors import (
    ChecksumMismatch,
    EmptySequence,
    IoError,
    MagicMismatch,
    ShapeMismatch,
    TokenOutOfRange,
    UnsupportedVersion,
)
from .model import ArchConfig, ModelCheckpoint, TokenCorpus, expected_shapes, tensor_order
from .quant import QuantModel, QuantTensor

CHECKPOINT_MAGIC = b"LIEQCKPT"
CORPUS_MAGIC = b"LIEQCORP"
QUANT_MAGIC = b"LIEQQNT"

CHECKPOINT_VERSION = 1
CORPUS_VERSION = 1
QUANT_VERSION = 1

_ALIGN = 64
_U32 = struct.Struct("<I")


def _pad_to(offset: int, align: int = _ALIGN) -> int:
    return (align - offset % align) % align


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise IoError(f"truncated file: expected {n} bytes for {what}, got {len(data)}")
    return data


def _check_magic(f: BinaryIO, magic: bytes, path: str) -> None:
    found = f.read(len(magic))
    if found != magic:
        raise MagicMismatch(magic, found, path)


def _check_version(f: BinaryIO, expected: int, path: str) -> None:
    (version,) = _U32.unpack(_read_exact(f, 4, "version"))
    if version != expected:
        raise UnsupportedVersion(
            f"{path}: format version {version} not supported (expected {expected})"
        )


# --- checkpoint --------------------------------------------------------------


def checkpoint_checksum(model: ModelCheckpoint) -> int:
    """CRC32 over the raw tensor bytes in canonical order (no padding)."""
    crc = 0
    for name in tensor_order(model.arch):
        crc = zlib.crc32(model.tensors[name].tobytes(), crc)
    return crc


def _checkpoint_layout(model: ModelCheckpoint):
    """Tensor index entries plus total payload size, offsets 64-aligned."""
    entries = []
    offset = 0
    for name in tensor_order(model.arch):
        t = model.tensors[name]
        offset += _pad_to(offset)
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.nbytes
    return entries, offset


def save_checkpoint(model: ModelCheckpoint, path: str) -> int:
    """Write a checkpoint; returns the payload CRC32."""
    entries, payload_size = _checkpoint_layout(model)
    header = json.dumps(
        {
            "arch": model.arch.to_json(),
            "tensors": entries,
            "payload_size": payload_size,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    crc = checkpoint_checksum(model)
    try:
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(_U32.pack(CHECKPOINT_VERSION))
            f.write(_U32.pack(len(header)))
            f.write(header)
            f.write(b"\x00" * _pad_to(f.tell()))
            payload_start = f.tell()
            for entry, name in zip(entries, tensor_order(model.arch)):
                f.write(b"\x00" * (payload_start + entry["offset"] - f.tell()))
                f.write(model.tensors[name].tobytes())
            f.write(_U32.pack(crc))
    except OSError as e:
        raise IoError(f"cannot write checkpoint {path}: {e}") from e
    return crc


def load_checkpoint(path: str) -> ModelCheckpoint:
    """Read and validate a checkpoint.

    Validation order: magic, version, header, tensor extents against the
    payload (catches truncation), payload CRC32, then per-tensor shape and
    finiteness checks inside the ModelCheckpoint constructor.
    """
    try:
        with open(path, "rb") as f:
            _check_magic(f, CHECKPOINT_MAGIC, path)
            _check_version(f, CHECKPOINT_VERSION, path)
            (header_len,) = _U32.unpack(_read_exact(f, 4, "header length"))
            header = json.loads(_read_exact(f, header_len, "header"))
            f.read(_pad_to(f.tell()))
            payload_size = int(header["payload_size"])
            payload = _read_exact(f, payload_size, "payload")
            (stored_crc,) = _U32.unpack(_read_exact(f, 4, "checksum"))
    except OSError as e:
        raise IoError(f"cannot read checkpoint {path}: {e}") from e

    arch = ArchConfig.from_json(header["arch"])
    shapes = expected_shapes(arch)
    index = {e["name"]: e for e in header["tensors"]}
    if set(index) != set(shapes):
        missing = sorted(set(shapes) - set(index))
        extra = sorted(set(index) - set(shapes))
        name = (missing + extra)[0]
        raise ShapeMismatch(name, f"tensor index mismatch (missing {missing}, extra {extra})")

    crc = 0
    tensors: dict[str, np.ndarray] = {}
    for name in tensor_order(arch):
        entry = index[name]
        shape = tuple(int(s) for s in entry["shape"])
        if shape != shapes[name]:
            raise ShapeMismatch(name, f"expected shape {shapes[name]}, got {shape}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = int(entry["offset"])
        end = start + 4 * count
        if start < 0 or end > payload_size:
            raise ShapeMismatch(name, f"extent [{start}, {end}) outside payload of {payload_size} bytes")
        raw = payload[start:end]
        crc = zlib.crc32(raw, crc)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if crc != stored_crc:
        raise ChecksumMismatch(stored_crc, crc, path)
    return ModelCheckpoint(arch=arch, tensors=tensors)


# --- corpus ------------------------------------------------------------------


def corpus_checksum(corpus: TokenCorpus) -> int:
    """CRC32 over the length-prefixed record bytes."""
    crc = 0
    for seq in corpus.sequences:
        crc = zlib.crc32(_U32.pack(seq.size), crc)
        crc = zlib.crc32(np.ascontiguousarray(seq, dtype="<u4").tobytes(), crc)
    return crc


def save_corpus(corpus: TokenCorpus, path: str) -> int:
    """Write a token corpus; returns the record-stream CRC32."""
    try:
        with open(path, "wb") as f:
            f.write(CORPUS_MAGIC)
            f.write(_U32.pack(CORPUS_VERSION))
            f.write(_U32.pack(corpus.vocab_bound))
            for seq in corpus.sequences:
                f.write(_U32.pack(seq.size))
                f.write(np.ascontiguousarray(seq, dtype="<u4").tobytes())
    except OSError as e:
        raise IoError(f"cannot write corpus {path}: {e}") from e
    return corpus_checksum(corpus)


def load_corpus(path: str) -> TokenCorpus:
    """Read a token corpus, validating ids in stream order."""
    try:
        with open(path, "rb") as f:
            _check_magic(f, CORPUS_MAGIC, path)
            _check_version(f, CORPUS_VERSION, path)
            (vocab_bound,) = _U32.unpack(_read_exact(f, 4, "vocab bound"))
            rest = f.read()
    except OSError as e:
        raise IoError(f"cannot read corpus {path}: {e}") from e

    sequences = []
    pos = 0
    idx = 0
    while pos < len(rest):
        if pos + 4 > len(rest):
            raise IoError(f"truncated corpus {path}: partial length prefix at byte {pos}")
        (n,) = _U32.unpack_from(rest, pos)
        pos += 4
        if n == 0:
            raise EmptySequence(idx)
        end = pos + 4 * n
        if end > len(rest):
            raise IoError(
                f"truncated corpus {path}: record {idx} declares {n} tokens "
                f"but only {(len(rest) - pos) // 4} remain"
            )
        seq = np.frombuffer(rest, dtype="<u4", count=n, offset=pos).copy()
        bad = np.nonzero(seq >= vocab_bound)[0]
        if bad.size:
            p = int(bad[0])
            raise TokenOutOfRange(idx, p, int(seq[p]), vocab_bound)
        sequences.append(seq)
        pos = end
        idx += 1
    return TokenCorpus(vocab_bound=vocab_bound, sequences=sequences)


# --- quantized model ---------------------------------------------------------


def save_qmodel(qmodel: QuantModel, path: str) -> int:
    """Write a quantized model; returns the payload CRC32.

    The payload holds, per tensor and in canonical order: packed code
    streams, float32 scales, uint8 zero points for packed tensors; raw
    float32 data for dense tensors. Each section is 64-byte aligned.
    """
    sections: list[bytes] = []
    index = []
    offset = 0

    def _add(data: bytes) -> int:
        nonlocal offset
        offset += _pad_to(offset)
        start = offset
        sections.append(data)
        offset += len(data)
        return start

    order = tensor_order(qmodel.arch)
    for name in order:
        t = qmodel.tensors[name]
        if isinstance(t, QuantTensor):
            entry = {
                "name": name,
                "kind": "packed",
                "shape": list(t.shape),
                "bits": t.bits,
                "group_size": t.group_size,
                "codes_offset": _add(t.packed),
                "codes_size": len(t.packed),
                "scales_offset": _add(np.ascontiguousarray(t.scales, dtype="<f4").tobytes()),
                "zero_points_offset": _add(t.zero_points.tobytes()),
                "n_groups": t.n_groups,
            }
        else:
            entry = {
                "name": name,
                "kind": "dense",
                "shape": list(t.shape),
                "offset": _add(np.ascontiguousarray(t, dtype="<f4").tobytes()),
            }
        index.append(entry)

    header = json.dumps(
        {
            "arch": qmodel.arch.to_json(),
            "group_size": qmodel.group_size,
            "plan": qmodel.plan.to_json(),
            "tensors": index,
            "payload_size": offset,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")

    crc = 0
    for data in sections:
        crc = zlib.crc32(data, crc)

    try:
        with open(path, "wb") as f:
            f.write(QUANT_MAGIC)
            f.write(_U32.pack(QUANT_VERSION))
            f.write(_U32.pack(len(header)))
            f.write(header)
            f.write(b"\x00" * _pad_to(f.tell()))
            payload_start = f.tell()
            pos = 0
            for data in sections:
                pad = _pad_to(pos)
                f.write(b"\x00" * pad)
                pos += pad
                f.write(data)
                pos += len(data)
            assert f.tell() == payload_start + offset
            f.write(_U32.pack(crc))
    except OSError as e:
        raise IoError(f"cannot write quantized model {path}: {e}") from e
    return crc


def load_qmodel(path: str) -> QuantModel:
    """Read and validate a quantized model."""
    try:
        with open(path, "rb") as f:
            _check_magic(f, QUANT_MAGIC, path)
            _check_version(f, QUANT_VERSION, path)
            (header_len,) = _U32.unpack(_read_exact(f, 4, "header length"))
            header = json.loads(_read_exact(f, header_len, "header"))
            f.read(_pad_to(f.tell()))
            payload_size = int(header["payload_size"])
            payload = _read_exact(f, payload_size, "payload")
            (stored_crc,) = _U32.unpack(_read_exact(f, 4, "checksum"))
    except OSError as e:
        raise IoError(f"cannot read quantized model {path}: {e}") from e

    arch = ArchConfig.from_json(header["arch"])
    plan = BitPlan.from_json(header["plan"])
    group_size = int(header["group_size"])
    shapes = expected_shapes(arch)

    def _slice(start: int, size: int, what: str) -> bytes:
        if start < 0 or start + size > payload_size:
            raise ShapeMismatch(what, f"extent [{start}, {start + size}) outside payload")
        return payload[start : start + size]

    # CRC runs over sections in file order, which is index order.
    crc = 0
    tensors: dict[str, object] = {}
    index = {e["name"]: e for e in header["tensors"]}
    if set(index) != set(shapes):
        missing = sorted(set(shapes) - set(index))
        extra = sorted(set(index) - set(shapes))
        raise ShapeMismatch((missing + extra)[0], f"tensor index mismatch (missing {missing}, extra {extra})")

    for name in tensor_order(arch):
        entry = index[name]
        shape = tuple(int(s) for s in entry["shape"])
        if shape != shapes[name]:
            raise ShapeMismatch(name, f"expected shape {shapes[name]}, got {shape}")
        if entry["kind"] == "packed":
            rows, cols = shape
            bits = int(entry["bits"])
            gsize = int(entry["group_size"])
            n_groups = int(entry["n_groups"])
            codes_size = int(entry["codes_size"])
            expected_bytes = (rows * cols * bits + 7) // 8
            if codes_size != expected_bytes:
                raise ShapeMismatch(name, f"packed stream {codes_size} bytes, expected {expected_bytes}")
            if n_groups != (cols + gsize - 1) // gsize:
                raise ShapeMismatch(name, f"n_groups {n_groups} inconsistent with group_size {gsize}")
            packed = _slice(int(entry["codes_offset"]), codes_size, name)
            scales_raw = _slice(int(entry["scales_offset"]), 4 * rows * n_groups, name)
            zps_raw = _slice(int(entry["zero_points_offset"]), rows * n_groups, name)
            crc = zlib.crc32(packed, crc)
            crc = zlib.crc32(scales_raw, crc)
            crc = zlib.crc32(zps_raw, crc)
            tensors[name] = QuantTensor(
                shape=(rows, cols),
                bits=bits,
                group_size=gsize,
                packed=packed,
                scales=np.frombuffer(scales_raw, dtype="<f4").reshape(rows, n_groups).copy(),
                zero_points=np.frombuffer(zps_raw, dtype=np.uint8).reshape(rows, n_groups).copy(),
            )
        elif entry["kind"] == "dense":
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = _slice(int(entry["offset"]), 4 * count, name)
            crc = zlib.crc32(raw, crc)
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        else:
            raise ShapeMismatch(name, f"unknown tensor kind {entry['kind']!r}")
    if crc != stored_crc:
        raise ChecksumMismatch(stored_crc, crc, path)
    return QuantModel(arch=arch, tensors=tensors, plan=plan, group_size=group_size)
