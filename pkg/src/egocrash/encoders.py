"""Frozen toy text/vision encoder.

Stands in for a pretrained contrastive image-text model. Text is embedded by
hash-bucketed word vectors plus sinusoidal positions; entity-class words map to
fixed orthonormal "concept" directions, and the frame embedder projects class
colour responses onto the same directions, so cosine similarity between a frame
and a prompt says whether the named entity is visible.

Every weight is drawn from a seeded generator at construction and never trained.
"""

from __future__ import annotations

import math
import re
import zlib
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .entities import ENTITY_CLASSES, ENTITY_COLORS
from .errors import ContractViolation

_WORD = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 64
    vocab_buckets: int = 1024
    max_prompt_len: int = 24
    max_question_len: int = 10
    max_answer_len: int = 32
    patch: int = 8
    color_tau: float = 0.2
    concept_gain: float = 8.0
    seed: int = 1234


def tokenize(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def sinusoidal(n: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(dim // 2, dtype=torch.float64)[None, :]
    ang = pos / (10000 ** (2 * i / dim))
    pe = torch.zeros(n, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(ang)
    pe[:, 1::2] = torch.cos(ang)
    return pe.to(dtype)


class ToyClip(nn.Module):
    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        n_concepts = len(ENTITY_CLASSES)
        if d < n_concepts + 8:
            raise ContractViolation("encoder dim too small for the concept subspace")
        g = torch.Generator().manual_seed(cfg.seed)

        q, _ = torch.linalg.qr(torch.randn(d, d, generator=g, dtype=torch.float64))
        concepts = q[:, :n_concepts].T.contiguous()  # [n_concepts, d], orthonormal rows
        proj_off = torch.eye(d, dtype=torch.float64) - concepts.T @ concepts

        table = torch.randn(cfg.vocab_buckets, d, generator=g, dtype=torch.float64)
        table = table @ proj_off
        table = table / table.norm(dim=1, keepdim=True).clamp_min(1e-12)

        generic = torch.randn(d, 7, generator=g, dtype=torch.float64) / math.sqrt(7)
        generic = proj_off @ generic

        self.register_buffer("concepts", concepts.float())
        self.register_buffer("word_table", table.float())
        self.register_buffer("generic_proj", generic.float())
        self.register_buffer("class_colors", torch.tensor([ENTITY_COLORS[c] for c in ENTITY_CLASSES]))

        self.patch_embed = nn.Conv2d(3, d, cfg.patch, stride=cfg.patch)
        self.token_mix = nn.Linear(d, d)
        with torch.no_grad():
            fan_in = 3 * cfg.patch * cfg.patch
            self.patch_embed.weight.copy_(torch.randn(self.patch_embed.weight.shape, generator=g) / math.sqrt(fan_in))
            self.patch_embed.bias.copy_(0.1 * torch.randn(d, generator=g))
            self.token_mix.weight.copy_(torch.randn(d, d, generator=g) / math.sqrt(d))
            self.token_mix.bias.zero_()
        self.requires_grad_(False)
        self._concept_index = {c: i for i, c in enumerate(ENTITY_CLASSES)}

    # ---- text ---------------------------------------------------------------

    def word_vector(self, word: str) -> torch.Tensor:
        idx = self._concept_index.get(word)
        if idx is not None:
            return self.concepts[idx]
        return self.word_table[zlib.crc32(word.encode("utf-8")) % self.cfg.vocab_buckets]

    def encode_text(self, text: str, max_len: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Token sequence ``[max_len, dim]`` with positions added, and a bool mask of real tokens."""
        max_len = max_len or self.cfg.max_prompt_len
        words = tokenize(text)[:max_len]
        out = torch.zeros(max_len, self.cfg.dim)
        mask = torch.zeros(max_len, dtype=torch.bool)
        if words:
            vecs = torch.stack([self.word_vector(w) for w in words])
            out[: len(words)] = vecs + 0.1 * sinusoidal(len(words), self.cfg.dim)
            mask[: len(words)] = True
        return out, mask

    def pooled_text(self, text: str) -> torch.Tensor:
        words = tokenize(text)
        if not words:
            return torch.zeros(self.cfg.dim)
        return torch.stack([self.word_vector(w) for w in words]).mean(0)

    # ---- vision -------------------------------------------------------------

    def class_responses(self, frames: torch.Tensor) -> torch.Tensor:
        """Soft colour-match fraction per class; frames ``[..., 3, H, W]`` in [-1, 1] -> ``[..., n_classes]``."""
        rgb = (frames.clamp(-1, 1) + 1) / 2
        diff = rgb.unsqueeze(-4) - self.class_colors.to(rgb.dtype)[:, :, None, None]
        d2 = (diff**2).sum(-3)
        return torch.exp(-d2 / (2 * self.cfg.color_tau**2)).mean((-2, -1))

    def embed_frames(self, frames: torch.Tensor) -> torch.Tensor:
        """Global embedding per frame: ``[..., 3, H, W] -> [..., dim]``."""
        rgb = (frames.clamp(-1, 1) + 1) / 2
        resp = self.class_responses(frames)
        gray = rgb.mean(-3)
        h, w = gray.shape[-2:]
        quads = gray.reshape(gray.shape[:-2] + (2, h // 2, 2, w // 2)).mean((-3, -1)).flatten(-2)
        feats = torch.cat([rgb.mean((-2, -1)), quads], dim=-1)
        concept = self.cfg.concept_gain * resp @ self.concepts.to(frames.dtype)
        return concept + feats @ self.generic_proj.to(frames.dtype).T

    def vision_tokens(self, frames: torch.Tensor) -> torch.Tensor:
        """Patch tokens of clean frames ``[B, F, 3, H, W] -> [B*n, F, dim]``."""
        b, f = frames.shape[:2]
        x = self.patch_embed(frames.flatten(0, 1))  # [B*F, d, h, w]
        x = x.flatten(2).transpose(1, 2)  # [B*F, n, d]
        x = x + F.gelu(self.token_mix(x))
        n = x.shape[1]
        return x.reshape(b, f, n, -1).permute(0, 2, 1, 3).reshape(b * n, f, -1)
