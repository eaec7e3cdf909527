"""Toy-scale text, spectrum and audio encoders sharing one embedding space.

Each encoder keeps the mechanism of its full-size counterpart at a size
small enough for finite-difference checks over the whole model:

* text: token embedding + sinusoidal positions, one single-head
  self-attention block with pad masking, read out at the ``[EOS]`` position;
* spectrum: average-pool onto a fixed grid of patches, patch MLP, then
  QKV attention pooling whose query is the mean-pooled patch vector;
* audio: non-overlapping waveform frames, per-frame linear frontend,
  temporal mean-pool, MLP.

Each branch ends with a bias-free projection (``W_t``, ``W_s``, ``W_a``)
into the ``embed_dim`` space followed by L2 normalization. The learnable
temperature ``tau`` lives on :class:`MuserModel` and is applied as
``exp(tau)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError
from .numerics import DTYPE, l2_normalize_rows
from .signal import AudioClip, Spectrum
from .text import EOS, PAD, TokenSequence

TAU_INIT = math.log(1.0 / 0.07)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 0
    embed_dim: int = 64
    text_dim: int = 64
    spec_dim: int = 64
    audio_dim: int = 64
    hidden: int = 128
    grid: int = 4
    patch: int = 4
    frame_feat: int = 256
    max_vocab: int = 2048
    logit_scale_clamp: float = 0.0

    def validate(self) -> None:
        for name in (
            "vocab_size", "embed_dim", "text_dim", "spec_dim", "audio_dim",
            "hidden", "grid", "patch", "frame_feat", "max_vocab",
        ):
            value = getattr(self, name)
            if int(value) <= 0:
                raise ConfigError(f"model.{name} must be positive, got {value}")
        if self.vocab_size > self.max_vocab:
            raise ConfigError(
                f"vocabulary of {self.vocab_size} exceeds model.max_vocab {self.max_vocab}"
            )
        if self.logit_scale_clamp < 0:
            raise ConfigError("model.logit_scale_clamp must be >= 0 (0 disables it)")


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=DTYPE)[:, None]
    rates = torch.exp(
        torch.arange(0, dim, 2, dtype=DTYPE) * (-math.log(10000.0) / dim)
    )
    table = torch.zeros(length, dim, dtype=DTYPE)
    table[:, 0::2] = torch.sin(pos * rates)
    table[:, 1::2] = torch.cos(pos * rates[: dim // 2])
    return table


def _mlp(dim: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        d = cfg.text_dim
        self.token_embedding = nn.Embedding(cfg.vocab_size, d)
        self.query = nn.Linear(d, d, bias=False)
        self.key = nn.Linear(d, d, bias=False)
        self.value = nn.Linear(d, d, bias=False)
        self.out = nn.Linear(d, d, bias=False)
        self.proj = nn.Linear(d, cfg.embed_dim, bias=False)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        vocab_size = self.token_embedding.num_embeddings
        if int(ids.max()) >= vocab_size or int(ids.min()) < 0:
            raise DataError(f"token id outside vocabulary of size {vocab_size}")
        n, length = ids.shape
        d = self.token_embedding.embedding_dim
        x = self.token_embedding(ids) + sinusoidal_positions(length, d)
        scores = self.query(x) @ self.key(x).transpose(1, 2) / math.sqrt(d)
        scores = scores.masked_fill((ids == PAD)[:, None, :], float("-inf"))
        h = x + self.out(torch.softmax(scores, dim=-1) @ self.value(x))
        eos = (ids == EOS).to(torch.int64).argmax(dim=1)
        return l2_normalize_rows(self.proj(h[torch.arange(n), eos]))


class SpectrumEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        d = cfg.spec_dim
        self.grid = cfg.grid
        self.patch = cfg.patch
        self.patch_embed = nn.Linear(cfg.patch * cfg.patch, d)
        self.mlp = _mlp(d, cfg.hidden)
        self.query = nn.Linear(d, d, bias=False)
        self.key = nn.Linear(d, d, bias=False)
        self.value = nn.Linear(d, d, bias=False)
        self.proj = nn.Linear(d, cfg.embed_dim, bias=False)

    def pool(self, mags: torch.Tensor) -> torch.Tensor:
        """Average-pool one F x T spectrum onto a (grid*patch)^2 lattice.

        The lattice is then layer-normalised to zero mean and unit variance
        with no affine parameters, so spectra differing by a gain or an
        offset pool to the same lattice.
        """
        side = self.grid * self.patch
        pooled = F.adaptive_avg_pool2d(mags[None, None], (side, side))[0, 0]
        return F.layer_norm(pooled.reshape(-1), (side * side,)).reshape(side, side)

    def forward(self, spectra: Sequence[torch.Tensor]) -> torch.Tensor:
        g, p = self.grid, self.patch
        grids = torch.stack([self.pool(m) for m in spectra])
        cells = grids.reshape(-1, g, p, g, p).permute(0, 1, 3, 2, 4).reshape(-1, g * g, p * p)
        tokens = self.patch_embed(cells)
        tokens = tokens + self.mlp(tokens)
        q = self.query(tokens.mean(dim=1))
        scores = torch.einsum("nd,ncd->nc", q, self.key(tokens)) / math.sqrt(q.shape[-1])
        attn = torch.softmax(scores, dim=-1)
        pooled = torch.einsum("nc,ncd->nd", attn, self.value(tokens))
        return l2_normalize_rows(self.proj(pooled))


class AudioEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.frame_feat = cfg.frame_feat
        self.frontend = nn.Linear(cfg.frame_feat, cfg.audio_dim)
        self.mlp = _mlp(cfg.audio_dim, cfg.hidden)
        self.proj = nn.Linear(cfg.audio_dim, cfg.embed_dim, bias=False)

    def pooled_features(self, waves: Sequence[torch.Tensor]) -> torch.Tensor:
        """Temporal mean of the frontend activations, one row per clip."""
        rows = []
        for wave in waves:
            n_frames = wave.shape[0] // self.frame_feat
            if n_frames == 0:
                raise DataError(
                    f"clip of {wave.shape[0]} samples is shorter than one "
                    f"{self.frame_feat}-sample frame"
                )
            frames = wave[: n_frames * self.frame_feat].reshape(n_frames, self.frame_feat)
            rows.append(F.gelu(self.frontend(frames)).mean(dim=0))
        return torch.stack(rows)

    def forward(self, waves: Sequence[torch.Tensor]) -> torch.Tensor:
        h = self.pooled_features(waves)
        h = h + self.mlp(h)
        return l2_normalize_rows(self.proj(h))


class MuserModel(nn.Module):
    """All trainable parameters: three encoders and the temperature ``tau``."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        cfg.validate()
        self.config = cfg
        self.text = TextEncoder(cfg)
        self.spectrum = SpectrumEncoder(cfg)
        self.audio = AudioEncoder(cfg)
        self.tau = nn.Parameter(torch.tensor(TAU_INIT, dtype=DTYPE))

    def logit_scale(self) -> torch.Tensor:
        scale = torch.exp(self.tau)
        if self.config.logit_scale_clamp > 0:
            scale = scale.clamp(max=self.config.logit_scale_clamp)
        return scale

    def encode_text(self, ids: torch.Tensor) -> torch.Tensor:
        return self.text(ids)

    def encode_spectrum(self, spectra: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.spectrum(spectra)

    def encode_audio(self, waves: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.audio(waves)


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(cfg: ModelConfig, seed: int) -> MuserModel:
    """Build a float64 model with Xavier-uniform weights and ``tau = ln(1/0.07)``.

    Biases draw from the same ``(-a, a)`` range as their layer's weights.
    The global torch RNG is left untouched.
    """
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = MuserModel(cfg).to(DTYPE)
        with torch.no_grad():
            for module in model.modules():
                if isinstance(module, nn.Linear):
                    nn.init.xavier_uniform_(module.weight)
                    if module.bias is not None:
                        bound = xavier_bound(module.in_features, module.out_features)
                        module.bias.uniform_(-bound, bound)
                elif isinstance(module, nn.Embedding):
                    nn.init.xavier_uniform_(module.weight)
            model.tau.fill_(TAU_INIT)
    return model


def token_tensor(tokens: Union[TokenSequence, Sequence[TokenSequence]]) -> torch.Tensor:
    if isinstance(tokens, TokenSequence):
        tokens = [tokens]
    return torch.tensor([list(t.ids) for t in tokens], dtype=torch.int64)


def spectrum_tensors(spectra: Union[Spectrum, Sequence[Spectrum]]) -> List[torch.Tensor]:
    if isinstance(spectra, Spectrum):
        spectra = [spectra]
    return [torch.from_numpy(np.asarray(s.mags, dtype=np.float64)) for s in spectra]


def wave_tensors(clips: Union[AudioClip, Sequence[AudioClip]]) -> List[torch.Tensor]:
    if isinstance(clips, AudioClip):
        clips = [clips]
    return [torch.from_numpy(c.samples) for c in clips]


def encode_text(tokens: Union[TokenSequence, Sequence[TokenSequence]], params: MuserModel) -> torch.Tensor:
    """Text embeddings, one unit-norm row per token sequence."""
    return params.encode_text(token_tensor(tokens))


def encode_spectrum(spec: Union[Spectrum, Sequence[Spectrum]], params: MuserModel) -> torch.Tensor:
    return params.encode_spectrum(spectrum_tensors(spec))


def encode_audio(clip: Union[AudioClip, Sequence[AudioClip]], params: MuserModel) -> torch.Tensor:
    return params.encode_audio(wave_tensors(clip))
