"""Similarity, class probabilities, the squeeze network and the domain losses.

All scalar losses accept torch tensors and stay differentiable; plain floats and
numpy arrays are accepted too and promoted to float64 tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .encoders import l2_normalize

DEFAULT_LAMBDAS = (1.0, 1.0, 0.5, 0.5)


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def cosine_similarity(a, b) -> torch.Tensor:
    """``a . b / (|a| |b|)`` along the last axis."""
    a, b = _t(a), _t(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ValueError("cosine similarity of a zero-norm vector")
    return (a * b).sum(-1) / (na * nb)


def class_probabilities(v, prompts, temperature: float) -> torch.Tensor:
    """Softmax over ``sim(v, t_i) / temperature``.

    ``v`` may be a single embedding ``(d,)`` or a batch ``(B, d)``; ``prompts`` is
    ``(N_sc, d)``.
    """
    v, prompts = _t(v), _t(prompts)
    if prompts.ndim != 2 or prompts.shape[0] == 0:
        raise ValueError("need a non-empty (N_sc, d) prompt matrix")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    sims = cosine_similarity(v[..., None, :], prompts)
    return torch.softmax(sims / temperature, dim=-1)


def prompt_ce_loss(probs, true_class) -> torch.Tensor:
    """``-ln probs[true_class]``; batched inputs give the batch mean."""
    probs = _t(probs)
    n = probs.shape[-1]
    if probs.ndim == 1:
        if not 0 <= int(true_class) < n:
            raise IndexError(f"class {true_class} out of range for {n} classes")
        return -torch.log(probs[int(true_class)])
    target = torch.as_tensor(true_class, dtype=torch.long)
    if bool((target < 0).any()) or bool((target >= n).any()):
        raise IndexError(f"class index out of range for {n} classes")
    return -torch.log(probs.gather(-1, target[:, None])[:, 0]).mean()


def prompt_ce_from_logits(v, prompts, temperature: float, true_class) -> torch.Tensor:
    """Same value as ``prompt_ce_loss(class_probabilities(...))`` via log-softmax."""
    sims = cosine_similarity(_t(v)[..., None, :], _t(prompts))
    logp = torch.log_softmax(sims / temperature, dim=-1)
    target = torch.as_tensor(true_class, dtype=torch.long)
    if logp.ndim == 1:
        return -logp[int(target)]
    return -logp.gather(-1, target[:, None])[:, 0].mean()


class SqueezeNet(nn.Module):
    """Feature-map squeeze: global average pool, affine C -> d, L2 normalize."""

    def __init__(self, channels: int, embed_dim: int):
        super().__init__()
        self.channels = channels
        self.proj = nn.Linear(channels, embed_dim)

    def pool(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[-3] != self.channels:
            raise ValueError(f"feature map has {f.shape[-3]} channels, squeeze expects {self.channels}")
        return f.mean(dim=(-2, -1))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return l2_normalize(self.proj(self.pool(f)))


def fsn_forward(f, fsn: SqueezeNet) -> torch.Tensor:
    return fsn(_t(f))


def similarity_score(v, f_sq, eps: float = 1e-7) -> torch.Tensor:
    """``(1 + sim(v, f')) / 2`` clamped to ``[eps, 1]``."""
    return torch.clamp((1 + cosine_similarity(v, f_sq)) / 2, eps, 1.0)


def dissimilarity_score(t, f_sq, eps: float = 1e-7) -> torch.Tensor:
    """``(1 - sim(t, f')) / 2`` clamped to ``[eps, 1]``."""
    return torch.clamp((1 - cosine_similarity(t, f_sq)) / 2, eps, 1.0)


def _check_unit_interval(x: torch.Tensor, name: str) -> None:
    if bool((x <= 0).any()) or bool((x > 1).any()):
        raise ValueError(f"{name} must lie in [eps, 1]; clamp before taking logs")


def domain_invariant_loss(s) -> torch.Tensor:
    """``-(1 - s) ln s`` (elementwise)."""
    s = _t(s)
    _check_unit_interval(s, "similarity score")
    return -(1 - s) * torch.log(s)


def domain_invariant_grad(s: float) -> float:
    """Closed-form derivative of :func:`domain_invariant_loss` with respect to ``s``."""
    return math.log(s) - (1 - s) / s


def domain_specific_loss(ds_list) -> torch.Tensor:
    """Mean over the last axis of ``-(1 - ds_i) ln ds_i``."""
    ds = _t(ds_list)
    if ds.numel() == 0 or ds.shape[-1] == 0:
        raise ValueError("domain-specific loss needs at least one dissimilarity score")
    _check_unit_interval(ds, "dissimilarity score")
    return (-(1 - ds) * torch.log(ds)).mean(dim=-1)


@dataclass(frozen=True)
class LossBreakdown:
    L_od: float
    L_lp: float
    L_di: float
    L_ds: float
    L_total: float
    lambdas: tuple[float, float, float, float] = DEFAULT_LAMBDAS

    @property
    def parts(self) -> tuple[float, float, float, float]:
        return (self.L_od, self.L_lp, self.L_di, self.L_ds)

    def as_row(self) -> dict:
        return {"L_od": self.L_od, "L_lp": self.L_lp, "L_di": self.L_di,
                "L_ds": self.L_ds, "L_total": self.L_total}


TERM_NAMES = ("L_od", "L_lp", "L_di", "L_ds")


def combine(parts, lambdas=DEFAULT_LAMBDAS):
    """Weighted sum; works on floats and tensors alike."""
    total = 0.0
    for lam, part in zip(lambdas, parts):
        total = total + lam * part
    return total


def total_loss(parts, lambdas=DEFAULT_LAMBDAS) -> LossBreakdown:
    """Check the four terms and return them with their weighted sum."""
    if len(parts) != 4 or len(lambdas) != 4:
        raise ValueError("expected four loss terms and four weights")
    values = [float(p) for p in parts]
    for name, value in zip(TERM_NAMES, values):
        if not math.isfinite(value):
            raise ValueError(f"{name} is not finite ({value})")
        if value < 0:
            raise ValueError(f"{name} is negative ({value})")
    lambdas = tuple(float(x) for x in lambdas)
    return LossBreakdown(*values, L_total=float(combine(values, lambdas)), lambdas=lambdas)
