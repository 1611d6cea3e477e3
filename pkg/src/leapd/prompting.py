"""Manual shooting-condition prompts and the learnable prompt bank."""
from __future__ import annotations

import torch
from torch import nn

from .config import DomainLabel
from .encoders import TextEncoder, TokenStream, tokenize

MANUAL_TEMPLATE = "An {altitude} altitude {view} view of a {weather} day taken by a drone"

INIT_STD = 0.02


def build_manual_prompt(domain: DomainLabel) -> str:
    return MANUAL_TEMPLATE.format(altitude=domain.altitude, view=domain.view, weather=domain.weather)


class PromptBank(nn.Module):
    """One row of ``n`` free context vectors per shooting-condition class."""

    def __init__(self, context: torch.Tensor):
        super().__init__()
        if context.ndim != 3:
            raise ValueError("context must have shape (N_sc, n, d_tok)")
        self.context = nn.Parameter(context)

    @property
    def n(self) -> int:
        return self.context.shape[1]

    @property
    def n_sc(self) -> int:
        return self.context.shape[0]

    def stream(self, class_index: int) -> TokenStream:
        if not 0 <= class_index < self.n_sc:
            raise IndexError(f"class index {class_index} out of range for {self.n_sc} prompts")
        return TokenStream(self.context[class_index], "learnable_context")


def init_prompt_bank(n: int, n_sc: int, d_tok: int, seed: int | torch.Generator,
                     dtype=torch.float64) -> PromptBank:
    """Context vectors drawn i.i.d. from N(0, 0.02^2)."""
    if min(n, n_sc, d_tok) < 1:
        raise ValueError(f"prompt bank sizes must be positive, got n={n}, N_sc={n_sc}, d_tok={d_tok}")
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    context = torch.randn(n_sc, n, d_tok, generator=gen, dtype=dtype) * INIT_STD
    return PromptBank(context)


def embed_class_prompt(bank: PromptBank, class_index: int, text_encoder: TextEncoder) -> torch.Tensor:
    return text_encoder(bank.stream(class_index))


def embed_all_prompts(bank: PromptBank, text_encoder: TextEncoder) -> torch.Tensor:
    """``(N_sc, d)`` prompt embeddings ordered by class index."""
    return torch.stack([embed_class_prompt(bank, i, text_encoder) for i in range(bank.n_sc)])


class ManualPrompts(nn.Module):
    """Filled templates for a fixed list of domains, embedded through the text encoder.

    Same downstream surface as the learnable bank: ``embed_all`` returns ``(N_sc, d)``.
    """

    def __init__(self, domains: list[DomainLabel]):
        super().__init__()
        if not domains:
            raise ValueError("manual prompts need at least one domain")
        self.domains = sorted(domains, key=lambda d: d.class_index)
        self.texts = [build_manual_prompt(d) for d in self.domains]

    @property
    def n_sc(self) -> int:
        return len(self.texts)

    def embed_all(self, text_encoder: TextEncoder) -> torch.Tensor:
        return torch.stack([text_encoder(tokenize(t, text_encoder)) for t in self.texts])


def prompt_embeddings(prompts: PromptBank | ManualPrompts, text_encoder: TextEncoder) -> torch.Tensor:
    if isinstance(prompts, PromptBank):
        return embed_all_prompts(prompts, text_encoder)
    return prompts.embed_all(text_encoder)
