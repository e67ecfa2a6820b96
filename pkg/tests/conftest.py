"""Shared test fixtures: small random models and corpora."""

from __future__ import annotations

import numpy as np
import pytest

from lieq import ArchConfig, ModelCheckpoint, TokenCorpus


def make_random_checkpoint(arch: ArchConfig, seed: int = 0, std: float | None = None) -> ModelCheckpoint:
    """Plain Gaussian checkpoint (no hot layer), norms at one."""
    rng = np.random.default_rng(seed)
    s = std if std is not None else 1.0 / np.sqrt(arch.d_model)
    d = arch.d_model

    def w(shape):
        return rng.normal(0.0, s, shape).astype(np.float32)

    tensors = {"embedding": w((arch.vocab_size, d))}
    for i in range(arch.n_layers):
        p = f"layer.{i}."
        tensors[p + "attn_norm"] = np.ones(d, dtype=np.float32)
        tensors[p + "W_Q"] = w((arch.n_heads * arch.d_head, d))
        tensors[p + "W_K"] = w((arch.n_heads * arch.d_head, d))
        tensors[p + "W_V"] = w((arch.n_heads * arch.d_head, d))
        tensors[p + "W_O"] = w((d, d))
        tensors[p + "mlp_norm"] = np.ones(d, dtype=np.float32)
        tensors[p + "W_gate"] = w((arch.d_ff, d))
        tensors[p + "W_up"] = w((arch.d_ff, d))
        tensors[p + "W_down"] = w((d, arch.d_ff))
    tensors["final_norm"] = np.ones(d, dtype=np.float32)
    tensors["lm_head"] = w((arch.vocab_size, d))
    return ModelCheckpoint(arch=arch, tensors=tensors)


def make_random_corpus(arch: ArchConfig, lengths, seed: int = 0) -> TokenCorpus:
    rng = np.random.default_rng(seed)
    seqs = [rng.integers(0, arch.vocab_size, n).astype(np.uint32) for n in lengths]
    return TokenCorpus(vocab_bound=arch.vocab_size, sequences=seqs)


@pytest.fixture(scope="session")
def tiny_arch() -> ArchConfig:
    return ArchConfig(
        n_layers=2, d_model=16, n_heads=2, d_head=8, d_ff=32,
        vocab_size=23, max_seq_len=128,
    )


@pytest.fixture(scope="session")
def tiny_model(tiny_arch) -> ModelCheckpoint:
    return make_random_checkpoint(tiny_arch, seed=11)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_arch) -> TokenCorpus:
    return make_random_corpus(tiny_arch, [5, 9, 17, 33, 40], seed=7)
