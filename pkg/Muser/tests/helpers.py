"""Shared fixtures for the test modules."""
from __future__ import annotations

from dataclasses import replace
from typing import List

import numpy as np
import torch

from muser.core.encoders import ModelConfig, MuserModel, init_params
from muser.core.text import Vocab, build_vocab, tokenize

TINY = ModelConfig(
    vocab_size=12, embed_dim=4, text_dim=4, spec_dim=4, audio_dim=4,
    hidden=4, grid=2, patch=2, frame_feat=8,
)

CORPUS = ["a song of rock, belongs to guitar", "a song of jazz, belongs to piano", "whose style is soft"]


def tiny_vocab() -> Vocab:
    return build_vocab(CORPUS)


def tiny_model(seed: int = 0) -> MuserModel:
    vocab = tiny_vocab()
    return init_params(replace(TINY, vocab_size=len(vocab)), seed)


def tiny_batch(n: int = 4, seed: int = 0):
    """(waves, token ids, spectra) for ``n`` random examples."""
    rng = np.random.default_rng(seed)
    vocab = tiny_vocab()
    waves: List[torch.Tensor] = [torch.from_numpy(rng.uniform(-0.9, 0.9, size=32)) for _ in range(n)]
    texts = [CORPUS[i % len(CORPUS)] + f" {'soft' if i % 2 else 'loud'}" for i in range(n)]
    ids = torch.tensor([list(tokenize(t, vocab, 10).ids) for t in texts], dtype=torch.int64)
    spectra = [torch.from_numpy(rng.normal(size=(9, 6))) for _ in range(n)]
    return waves, ids, spectra
