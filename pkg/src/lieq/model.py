"""Model core: architecture description, checkpoint container, forward pass.

The reference architecture is a pre-norm decoder stack: RMSNorm in front of
attention and MLP, rotary position embedding on queries and keys, SwiGLU MLP,
a final RMSNorm, and an untied output projection. All forward math accumulates
in float64 so results are deterministic and platform-stable; weights are held
in float32.

A "layer input" for diagnostic purposes is the normalized residual stream that
feeds that layer's Q/K/V projections in the intact model. Skipping a layer
bypasses the entire block (attention and MLP), leaving the residual unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    EmptySequence,
    LayerOutOfRange,
    NonFiniteWeight,
    SequenceTooLong,
    SequenceTooShort,
    ShapeMismatch,
    TokenOutOfRange,
)

ROPE_BASE = 10000.0

# Per-layer tensor basenames, in canonical storage order.
LAYER_TENSORS = (
    "attn_norm",
    "W_Q",
    "W_K",
    "W_V",
    "W_O",
    "mlp_norm",
    "W_gate",
    "W_up",
    "W_down",
)

# The linear weights eligible for low-bit quantization.
QUANTIZABLE = ("W_Q", "W_K", "W_V", "W_O", "W_gate", "W_up", "W_down")


@dataclass(frozen=True)
class ArchConfig:
    """Static architecture hyperparameters.

    d_head must be even because rotary embedding rotates coordinate pairs.
    """

    n_layers: int
    d_model: int
    n_heads: int
    d_head: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    norm_eps: float = 1e-6

    def __post_init__(self) -> None:
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.n_heads < 1 or self.d_head < 1:
            raise ValueError("n_heads and d_head must be >= 1")
        if self.n_heads * self.d_head != self.d_model:
            raise ValueError(
                f"n_heads * d_head must equal d_model "
                f"({self.n_heads} * {self.d_head} != {self.d_model})"
            )
        if self.d_head % 2 != 0:
            raise ValueError("d_head must be even (rotary pairs coordinates)")
        if self.d_ff < 1:
            raise ValueError("d_ff must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be >= 2")
        if not (self.norm_eps > 0.0):
            raise ValueError("norm_eps must be positive")

    def to_json(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_head": self.d_head,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "norm_eps": self.norm_eps,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ArchConfig":
        return cls(
            n_layers=int(obj["n_layers"]),
            d_model=int(obj["d_model"]),
            n_heads=int(obj["n_heads"]),
            d_head=int(obj["d_head"]),
            d_ff=int(obj["d_ff"]),
            vocab_size=int(obj["vocab_size"]),
            max_seq_len=int(obj["max_seq_len"]),
            norm_eps=float(obj["norm_eps"]),
        )


def expected_shapes(arch: ArchConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor name -> shape map for one checkpoint."""
    d = arch.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "embedding": (arch.vocab_size, d),
    }
    for i in range(arch.n_layers):
        p = f"layer.{i}."
        shapes[p + "attn_norm"] = (d,)
        shapes[p + "W_Q"] = (arch.n_heads * arch.d_head, d)
        shapes[p + "W_K"] = (arch.n_heads * arch.d_head, d)
        shapes[p + "W_V"] = (arch.n_heads * arch.d_head, d)
        shapes[p + "W_O"] = (d, d)
        shapes[p + "mlp_norm"] = (d,)
        shapes[p + "W_gate"] = (arch.d_ff, d)
        shapes[p + "W_up"] = (arch.d_ff, d)
        shapes[p + "W_down"] = (d, arch.d_ff)
    shapes["final_norm"] = (d,)
    shapes["lm_head"] = (arch.vocab_size, d)
    return shapes


def tensor_order(arch: ArchConfig) -> list[str]:
    """Canonical on-disk tensor order."""
    names = ["embedding"]
    for i in range(arch.n_layers):
        names.extend(f"layer.{i}.{base}" for base in LAYER_TENSORS)
    names.extend(["final_norm", "lm_head"])
    return names


@dataclass
class ModelCheckpoint:
    """Float32 weights keyed by canonical tensor names, plus the architecture.

    Construction validates completeness, shapes, and finiteness; tensors are
    normalized to contiguous float32 so serialization is bit-stable.
    """

    arch: ArchConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        shapes = expected_shapes(self.arch)
        for name in self.tensors:
            if name not in shapes:
                raise ShapeMismatch(name, "unexpected tensor name")
        normalized: dict[str, np.ndarray] = {}
        for name, shape in shapes.items():
            if name not in self.tensors:
                raise ShapeMismatch(name, "missing tensor")
            t = np.ascontiguousarray(self.tensors[name], dtype=np.float32)
            if t.shape != shape:
                raise ShapeMismatch(
                    name, f"expected shape {shape}, got {t.shape}"
                )
            if not np.isfinite(t).all():
                raise NonFiniteWeight(name)
            normalized[name] = t
        self.tensors = normalized

    def layer_param_count(self, layer: int) -> int:
        """Parameters in the quantizable linear weights of one layer."""
        if not 0 <= layer < self.arch.n_layers:
            raise LayerOutOfRange(layer, self.arch.n_layers)
        return sum(
            self.tensors[f"layer.{layer}.{base}"].size for base in QUANTIZABLE
        )


@dataclass
class TokenCorpus:
    """Token id sequences plus the vocabulary bound they were checked against."""

    vocab_bound: int
    sequences: list[np.ndarray]

    def __post_init__(self) -> None:
        if self.vocab_bound < 1:
            raise ValueError("vocab_bound must be >= 1")
        normalized = []
        for i, seq in enumerate(self.sequences):
            arr = np.ascontiguousarray(seq, dtype=np.uint32)
            if arr.ndim != 1:
                raise ValueError(f"sequence {i} is not one-dimensional")
            if arr.size == 0:
                raise EmptySequence(i)
            bad = np.nonzero(arr >= self.vocab_bound)[0]
            if bad.size:
                pos = int(bad[0])
                raise TokenOutOfRange(i, pos, int(arr[pos]), self.vocab_bound)
            normalized.append(arr)
        self.sequences = normalized

    def __len__(self) -> int:
        return len(self.sequences)


@dataclass
class HiddenMatrix:
    """Normalized residual-stream input to one layer's Q/K/V projections."""

    values: np.ndarray  # (T, d_model) float64
    layer: int
    sequence_id: int = 0


def normalize_skip(skip: Iterable[int] | None, n_layers: int) -> frozenset[int]:
    """Validate a skip set of layer indices against the layer count."""
    if skip is None:
        return frozenset()
    out = frozenset(int(i) for i in skip)
    for i in out:
        if not 0 <= i < n_layers:
            raise LayerOutOfRange(i, n_layers)
    return out


# --- forward-pass internals ------------------------------------------------


def _rms_norm(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    """Row-wise RMS normalization with a learned per-channel gain."""
    x = np.asarray(x, dtype=np.float64)
    scale = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * scale * np.asarray(weight, dtype=np.float64)


def _rope_tables(n_pos: int, d_head: int) -> tuple[np.ndarray, np.ndarray]:
    """Cosine and sine tables, shape (n_pos, d_head // 2), positions from 0."""
    half = d_head // 2
    inv_freq = ROPE_BASE ** (-np.arange(0, half, dtype=np.float64) * 2.0 / d_head)
    angles = np.outer(np.arange(n_pos, dtype=np.float64), inv_freq)
    return np.cos(angles), np.sin(angles)


def _rope_rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate (T, H, d_head) coordinates pairing i with i + d_head/2."""
    half = x.shape[-1] // 2
    x1 = x[..., :half]
    x2 = x[..., half:]
    c = cos[:, None, :]
    s = sin[:, None, :]
    return np.concatenate((x1 * c - x2 * s, x2 * c + x1 * s), axis=-1)


def _silu(x: np.ndarray) -> np.ndarray:
    """Numerically stable x * sigmoid(x)."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = x[pos] / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = x[~pos] * ex / (1.0 + ex)
    return out


def _apply_linear(weight, x: np.ndarray) -> np.ndarray:
    """x @ weight.T with float64 accumulation.

    Dense float arrays multiply directly; packed tensors provide their own
    fused dequantize-and-multiply so the full float weight never materializes.
    """
    if isinstance(weight, np.ndarray):
        return x @ weight.astype(np.float64, copy=False).T
    return weight.right_matmul(x)


def _softmax_last(x: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis (max subtraction first)."""
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def _block_forward(
    arch: ArchConfig,
    tensors: Mapping[str, object],
    layer: int,
    x: np.ndarray,
    cos: np.ndarray,
    sin: np.ndarray,
) -> np.ndarray:
    """One decoder block: attention then MLP, each with a residual add."""
    T = x.shape[0]
    H, dh = arch.n_heads, arch.d_head
    p = f"layer.{layer}."

    h = _rms_norm(x, tensors[p + "attn_norm"], arch.norm_eps)
    q = _apply_linear(tensors[p + "W_Q"], h).reshape(T, H, dh)
    k = _apply_linear(tensors[p + "W_K"], h).reshape(T, H, dh)
    v = _apply_linear(tensors[p + "W_V"], h).reshape(T, H, dh)

    q = _rope_rotate(q, cos, sin).transpose(1, 0, 2)  # (H, T, dh)
    k = _rope_rotate(k, cos, sin).transpose(1, 0, 2)
    v = v.transpose(1, 0, 2)

    scores = (q @ k.transpose(0, 2, 1)) / math.sqrt(dh)  # (H, T, T)
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)
    scores[:, causal] = -np.inf
    attn = _softmax_last(scores)

    ctx = (attn @ v).transpose(1, 0, 2).reshape(T, H * dh)
    x = x + _apply_linear(tensors[p + "W_O"], ctx)

    h2 = _rms_norm(x, tensors[p + "mlp_norm"], arch.norm_eps)
    gate = _silu(_apply_linear(tensors[p + "W_gate"], h2))
    up = _apply_linear(tensors[p + "W_up"], h2)
    x = x + _apply_linear(tensors[p + "W_down"], gate * up)
    return x


def _validate_tokens(arch: ArchConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.ascontiguousarray(tokens, dtype=np.int64).ravel()
    if tokens.size > arch.max_seq_len:
        raise SequenceTooLong(
            f"sequence length {tokens.size} exceeds max_seq_len {arch.max_seq_len}"
        )
    bad = np.nonzero((tokens < 0) | (tokens >= arch.vocab_size))[0]
    if bad.size:
        pos = int(bad[0])
        raise TokenOutOfRange(0, pos, int(tokens[pos]), arch.vocab_size)
    return tokens


def _residual_stream(
    arch: ArchConfig,
    tensors: Mapping[str, object],
    tokens: np.ndarray,
    skip: frozenset[int],
    stop_layer: int | None = None,
) -> np.ndarray:
    """Residual stream after running blocks [0, stop_layer) (or all blocks)."""
    emb = tensors["embedding"]
    x = emb[tokens].astype(np.float64)
    cos, sin = _rope_tables(tokens.size, arch.d_head)
    end = arch.n_layers if stop_layer is None else stop_layer
    for layer in range(end):
        if layer in skip:
            continue
        x = _block_forward(arch, tensors, layer, x, cos, sin)
    return x


def forward_nll(
    model,
    tokens: np.ndarray,
    skip: Iterable[int] | None = None,
) -> np.ndarray:
    """Per-position negative log-likelihoods for one sequence.

    Entry i is -log p(tokens[i + 1] | tokens[: i + 1]); the result has
    length len(tokens) - 1. Layers listed in skip are bypassed entirely.
    Accepts anything exposing .arch and .tensors, so float checkpoints and
    packed quantized models run through the same code path.
    """
    arch: ArchConfig = model.arch
    tokens = _validate_tokens(arch, tokens)
    if tokens.size < 2:
        raise SequenceTooShort(
            f"need at least 2 tokens to score, got {tokens.size}"
        )
    skipset = normalize_skip(skip, arch.n_layers)

    x = _residual_stream(arch, model.tensors, tokens, skipset)
    x = _rms_norm(x, model.tensors["final_norm"], arch.norm_eps)
    logits = _apply_linear(model.tensors["lm_head"], x)  # (T, V)

    rows = logits[:-1]
    targets = tokens[1:]
    m = np.max(rows, axis=1)
    lse = m + np.log(np.sum(np.exp(rows - m[:, None]), axis=1))
    return lse - rows[np.arange(rows.shape[0]), targets]


def capture_hidden(
    model,
    tokens: np.ndarray,
    layer: int,
    sequence_id: int = 0,
) -> HiddenMatrix:
    """Input consumed by layer's Q/K/V projections in the intact model.

    Runs blocks [0, layer) untouched, then applies that layer's attention
    RMSNorm. No layers are skipped during capture.
    """
    arch: ArchConfig = model.arch
    if not 0 <= layer < arch.n_layers:
        raise LayerOutOfRange(layer, arch.n_layers)
    tokens = _validate_tokens(arch, tokens)
    if tokens.size < 1:
        raise SequenceTooShort("cannot capture hidden state of empty sequence")
    x = _residual_stream(arch, model.tensors, tokens, frozenset(), stop_layer=layer)
    h = _rms_norm(x, model.tensors[f"layer.{layer}.attn_norm"], arch.norm_eps)
    return HiddenMatrix(values=h, layer=layer, sequence_id=sequence_id)


def project_activation(
    weight: np.ndarray,
    hidden: HiddenMatrix | np.ndarray,
    head: int = 0,
    d_head: int | None = None,
) -> np.ndarray:
    """Activation matrix of one projection head: hidden @ slice(weight).T.

    With d_head omitted the whole weight is treated as a single head. With
    d_head given, rows [head * d_head, (head + 1) * d_head) are used.
    Result is (T, d_head) in float64.
    """
    h = hidden.values if isinstance(hidden, HiddenMatrix) else np.asarray(hidden)
    h = h.astype(np.float64, copy=False)
    w = np.asarray(weight, dtype=np.float64)
    if h.ndim != 2 or w.ndim != 2:
        raise ShapeMismatch("projection", "need 2-D hidden and weight")
    if w.shape[1] != h.shape[1]:
        raise ShapeMismatch(
            "projection",
            f"weight columns {w.shape[1]} != hidden width {h.shape[1]}",
        )
    if d_head is None:
        if head != 0:
            raise ShapeMismatch("projection", "head > 0 requires d_head")
        rows = w
    else:
        lo, hi = head * d_head, (head + 1) * d_head
        if lo < 0 or hi > w.shape[0]:
            raise ShapeMismatch(
                "projection",
                f"head slice [{lo}, {hi}) outside {w.shape[0]} rows",
            )
        rows = w[lo:hi]
    return h @ rows.T
