"""Synthetic desk-scale fixtures: a seeded checkpoint plus a matching corpus.

The checkpoint is a small random decoder in which one designated "hot" layer
gets low-rank, high-gain attention weights. That layer dominates the model's
predictions and concentrates its activation spectra, so diagnostics should
single it out. When a hot layer is set, the other layers' output projections
(W_O, W_down) are damped by background_gain: the predictive structure then
runs through the hot layer, and evaluation quality responds to where the
bit budget goes rather than to incidental quantization noise from layers
that carry no signal.

The corpus is sampled from the fixture model itself (ancestral sampling at a
fixed temperature below one) rather than drawn uniformly over the vocabulary:
the diagnostics measure how much each layer contributes to predicting the
corpus, which is only meaningful when the corpus carries structure the model
can predict, and the temperature gives that structure a margin over the
uniform distribution that survives moderate quantization damage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimsTooLarge
from .model import (
    ArchConfig,
    ModelCheckpoint,
    TokenCorpus,
    _rms_norm,
    _rope_tables,
    _silu,
)

MAX_FIXTURE_LAYERS = 8
MAX_FIXTURE_DIM = 128

HOT_RANK = 2


@dataclass(frozen=True)
class FixtureSpec:
    """Parameters for one synthetic model/corpus pair."""

    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 97
    max_seq_len: int = 512
    seed: int = 0
    hot_layer: int | None = 2
    hot_gain: float = 10.0
    background_gain: float = 0.05
    bucket_ranges: tuple[tuple[int, int], ...] = ((33, 128), (129, 512))
    sequences_per_bucket: int = 8
    max_passage_len: int = 192
    temperature: float = 0.7

    def arch(self) -> ArchConfig:
        if self.n_layers > MAX_FIXTURE_LAYERS or self.d_model > MAX_FIXTURE_DIM:
            raise DimsTooLarge(
                f"fixture limited to {MAX_FIXTURE_LAYERS} layers and "
                f"d_model {MAX_FIXTURE_DIM}, got {self.n_layers}/{self.d_model}"
            )
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        return ArchConfig(
            n_layers=self.n_layers,
            d_model=self.d_model,
            n_heads=self.n_heads,
            d_head=self.d_model // self.n_heads,
            d_ff=self.d_ff,
            vocab_size=self.vocab_size,
            max_seq_len=self.max_seq_len,
        )


def _random_weights(arch: ArchConfig, spec: FixtureSpec) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    base_std = 1.0 / np.sqrt(arch.d_model)

    def dense(shape, std):
        return rng.normal(0.0, std, shape).astype(np.float32)

    def low_rank(shape, gain):
        # rank-compressed, scaled so entries keep std gain * base_std
        a = rng.normal(0.0, 1.0, (shape[0], HOT_RANK))
        b = rng.normal(0.0, 1.0, (HOT_RANK, shape[1]))
        scale = gain * base_std / np.sqrt(HOT_RANK)
        return (scale * (a @ b)).astype(np.float32)

    d = arch.d_model
    tensors: dict[str, np.ndarray] = {
        "embedding": dense((arch.vocab_size, d), base_std),
    }
    # bystander damping only makes sense relative to a hot layer
    damp = spec.background_gain if spec.hot_layer is not None else 1.0
    for i in range(arch.n_layers):
        hot = spec.hot_layer is not None and i == spec.hot_layer
        out_std = base_std if hot else base_std * damp
        p = f"layer.{i}."
        tensors[p + "attn_norm"] = np.ones(d, dtype=np.float32)
        for name in ("W_Q", "W_K", "W_V"):
            shape = (arch.n_heads * arch.d_head, d)
            tensors[p + name] = (
                low_rank(shape, spec.hot_gain) if hot else dense(shape, base_std)
            )
        tensors[p + "W_O"] = (
            low_rank((d, d), spec.hot_gain) if hot else dense((d, d), out_std)
        )
        tensors[p + "mlp_norm"] = np.ones(d, dtype=np.float32)
        tensors[p + "W_gate"] = dense((arch.d_ff, d), base_std)
        tensors[p + "W_up"] = dense((arch.d_ff, d), base_std)
        tensors[p + "W_down"] = dense((d, arch.d_ff), out_std)
    tensors["final_norm"] = np.ones(d, dtype=np.float32)
    tensors["lm_head"] = dense((arch.vocab_size, d), base_std)
    return tensors


def _sample_batch(
    model: ModelCheckpoint,
    lengths: list[int],
    rng: np.random.Generator,
    temperature: float,
    collect_logits: bool = False,
):
    """Ancestral sampling with a per-layer KV cache, one batch of sequences.

    Each step embeds the current token, runs it through all blocks attending
    to the cached keys/values, and samples the next token from the softmax of
    the logits. Returns the sequences truncated to their target lengths (an
    autoregressive prefix is itself a valid sample).
    """
    arch = model.arch
    t_all = model.tensors
    B = len(lengths)
    t_max = max(lengths)
    H, dh, d = arch.n_heads, arch.d_head, arch.d_model
    inv_sqrt_dh = 1.0 / np.sqrt(dh)

    cos, sin = _rope_tables(t_max, dh)
    tokens = np.zeros((B, t_max), dtype=np.uint32)
    tokens[:, 0] = rng.integers(0, arch.vocab_size, B)

    k_cache = np.zeros((arch.n_layers, B, t_max, H, dh))
    v_cache = np.zeros((arch.n_layers, B, t_max, H, dh))
    emb = t_all["embedding"].astype(np.float64)
    logits_log = [] if collect_logits else None

    for t in range(t_max):
        x = emb[tokens[:, t]]  # (B, d)
        for layer in range(arch.n_layers):
            p = f"layer.{layer}."
            h = _rms_norm(x, t_all[p + "attn_norm"], arch.norm_eps)
            q = (h @ t_all[p + "W_Q"].astype(np.float64).T).reshape(B, H, dh)
            kk = (h @ t_all[p + "W_K"].astype(np.float64).T).reshape(B, H, dh)
            vv = (h @ t_all[p + "W_V"].astype(np.float64).T).reshape(B, H, dh)

            half = dh // 2
            c, s = cos[t], sin[t]
            for arr in (q, kk):
                a1 = arr[..., :half].copy()
                a2 = arr[..., half:].copy()
                arr[..., :half] = a1 * c - a2 * s
                arr[..., half:] = a2 * c + a1 * s

            k_cache[layer, :, t] = kk
            v_cache[layer, :, t] = vv

            keys = k_cache[layer, :, : t + 1]  # (B, t+1, H, dh)
            vals = v_cache[layer, :, : t + 1]
            scores = np.einsum("bhd,bshd->bhs", q, keys) * inv_sqrt_dh
            scores -= scores.max(axis=-1, keepdims=True)
            w = np.exp(scores)
            w /= w.sum(axis=-1, keepdims=True)
            ctx = np.einsum("bhs,bshd->bhd", w, vals).reshape(B, d)
            x = x + ctx @ t_all[p + "W_O"].astype(np.float64).T

            h2 = _rms_norm(x, t_all[p + "mlp_norm"], arch.norm_eps)
            gate = _silu(h2 @ t_all[p + "W_gate"].astype(np.float64).T)
            up = h2 @ t_all[p + "W_up"].astype(np.float64).T
            x = x + (gate * up) @ t_all[p + "W_down"].astype(np.float64).T

        xf = _rms_norm(x, t_all["final_norm"], arch.norm_eps)
        logits = xf @ t_all["lm_head"].astype(np.float64).T  # (B, V)
        if collect_logits:
            logits_log.append(logits.copy())
        if t + 1 < t_max:
            z = logits / temperature
            z -= z.max(axis=-1, keepdims=True)
            probs = np.exp(z)
            probs /= probs.sum(axis=-1, keepdims=True)
            cdf = np.cumsum(probs, axis=-1)
            u = rng.random(B)
            nxt = (cdf < u[:, None]).sum(axis=-1)
            tokens[:, t + 1] = np.minimum(nxt, arch.vocab_size - 1)

    seqs = [tokens[i, : lengths[i]].copy() for i in range(B)]
    if collect_logits:
        return seqs, np.stack(logits_log, axis=1)  # (B, t_max, V)
    return seqs


def make_fixture(spec: FixtureSpec | None = None) -> tuple[ModelCheckpoint, TokenCorpus]:
    """Build a seeded synthetic checkpoint and a corpus sampled from it.

    Deterministic: the same spec always yields bit-identical artifacts.
    """
    spec = spec if spec is not None else FixtureSpec()
    arch = spec.arch()
    if spec.hot_layer is not None and not 0 <= spec.hot_layer < arch.n_layers:
        raise ValueError(
            f"hot_layer {spec.hot_layer} outside [0, {arch.n_layers})"
        )
    model = ModelCheckpoint(arch=arch, tensors=_random_weights(arch, spec))

    sequences: list[np.ndarray] = []
    for b_idx, (lo, hi) in enumerate(spec.bucket_ranges):
        hi_eff = min(hi, spec.max_passage_len, arch.max_seq_len)
        if hi_eff < lo:
            raise ValueError(
                f"bucket [{lo}, {hi}] empty after clamping to {hi_eff}"
            )
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, b_idx]))
        lengths = rng.integers(lo, hi_eff + 1, spec.sequences_per_bucket).tolist()
        sequences.extend(_sample_batch(model, lengths, rng, spec.temperature))
    corpus = TokenCorpus(vocab_bound=arch.vocab_size, sequences=sequences)
    return model, corpus
