"""Reference vision-language encoder pair mapping into a shared unit sphere.

Both encoders are deliberately tiny so that the whole pipeline trains on a CPU.
Anything exposing ``encode_image`` / ``encode_tokens`` with the same output
contract (unit-norm ``embed_dim`` vectors) can stand in for them.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import torch
from torch import nn


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True)


@dataclass
class TokenStream:
    """Token vectors of shape ``(length, d_tok)`` fed to the text encoder."""

    vectors: torch.Tensor
    source: str  # "tokenized_text" | "learnable_context"

    def __post_init__(self):
        if self.source not in ("tokenized_text", "learnable_context"):
            raise ValueError(f"unknown token source {self.source!r}")
        if self.vectors.ndim != 2 or self.vectors.shape[0] == 0:
            raise ValueError("token stream must be a non-empty (length, d_tok) tensor")

    def __len__(self):
        return self.vectors.shape[0]


class ImageEncoder(nn.Module):
    """Three stride-2 conv stages, global average pool, affine map to ``embed_dim``.

    Inputs in [0, 1] are centred first and every stage is group-normalised, so
    even a randomly initialised (frozen) encoder responds to image content
    rather than to its biases.
    """

    def __init__(self, embed_dim: int = 64, in_channels: int = 3, widths=(8, 16, 32)):
        super().__init__()
        self.in_channels = in_channels
        layers, c = [], in_channels
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, stride=2, padding=1), nn.GroupNorm(min(4, w // 2), w), nn.SiLU()]
            c = w
        self.stages = nn.Sequential(*layers)
        self.proj = nn.Linear(c, embed_dim)
        self.embed_dim = embed_dim

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim == 3:
            return self.forward(images[None])[0]
        if images.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {images.shape[1]}")
        if images.shape[-1] < 8 or images.shape[-2] < 8:
            raise ValueError(f"image must be at least 8x8, got {tuple(images.shape[-2:])}")
        h = self.stages((images - 0.5) / 0.25).mean(dim=(2, 3))
        return l2_normalize(self.proj(h))

    encode_image = forward


class TextEncoder(nn.Module):
    """Mean over token vectors, one tanh hidden layer, affine map to ``embed_dim``.

    Also owns the hashed-vocabulary token table used by :func:`tokenize`.
    """

    def __init__(self, embed_dim: int = 64, token_dim: int = 32, hidden: int = 64,
                 vocab_size: int = 1024, max_seq_len: int = 16):
        super().__init__()
        self.token_table = nn.Embedding(vocab_size, token_dim)
        self.hidden = nn.Linear(token_dim, hidden)
        self.out = nn.Linear(hidden, embed_dim)
        self.embed_dim = embed_dim
        self.token_dim = token_dim
        self.vocab_size = vocab_size
        self.max_seq_len = max_seq_len

    def forward(self, tokens: TokenStream | torch.Tensor) -> torch.Tensor:
        vectors = tokens.vectors if isinstance(tokens, TokenStream) else tokens
        if vectors.shape[-2] == 0:
            raise ValueError("empty token stream")
        if vectors.shape[-2] > self.max_seq_len:
            raise ValueError(f"token stream of length {vectors.shape[-2]} exceeds {self.max_seq_len}")
        if vectors.shape[-1] != self.token_dim:
            raise ValueError(f"token vectors have dim {vectors.shape[-1]}, expected {self.token_dim}")
        h = torch.tanh(self.hidden(vectors.mean(dim=-2)))
        return l2_normalize(self.out(h))

    encode_tokens = forward

    def token_ids(self, text: str) -> list[int]:
        if not text or not text.strip():
            raise ValueError("cannot tokenize empty text")
        if not text.isascii():
            raise ValueError("text must be ASCII")
        return [zlib.crc32(w.encode()) % self.vocab_size for w in text.lower().split()]


def tokenize(text: str, encoder: TextEncoder) -> TokenStream:
    """Lowercased whitespace words, hashed into ``encoder``'s token table."""
    ids = torch.tensor(encoder.token_ids(text), dtype=torch.long)
    return TokenStream(encoder.token_table(ids), "tokenized_text")


def encode_image(image, encoder: ImageEncoder) -> torch.Tensor:
    x = torch.as_tensor(image, dtype=encoder.proj.weight.dtype)
    return encoder(x)


def encode_tokens(tokens: TokenStream, encoder: TextEncoder) -> torch.Tensor:
    return encoder(tokens)


def set_trainable(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


__all__ = [
    "ImageEncoder",
    "TextEncoder",
    "TokenStream",
    "encode_image",
    "encode_tokens",
    "l2_normalize",
    "set_trainable",
    "tokenize",
]
