"""Latent-rule fusion, TransE scoring of candidate tails, and the training losses.

Scores are distances: lower means more plausible and candidates rank ascending.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .embedding import transe_distance


def fuse(entity: torch.Tensor, z: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Residual fusion ``tanh(W [e; z] + b) + e``."""
    z = z.expand(entity.shape[:-1] + z.shape[-1:])
    return torch.tanh(F.linear(torch.cat([entity, z], dim=-1), weight, bias)) + entity


class Scorer(nn.Module):
    def __init__(self, dim: int, latent_dim: int = None, use_latent: bool = True):
        super().__init__()
        latent_dim = latent_dim or 4 * dim
        self.use_latent = use_latent
        self.g_h = nn.Linear(dim + latent_dim, dim)
        self.g_t = nn.Linear(dim + latent_dim, dim)
        for g in (self.g_h, self.g_t):
            nn.init.zeros_(g.weight)
            nn.init.zeros_(g.bias)

    def forward(self, h_tilde: torch.Tensor, r_bar: torch.Tensor, t_tilde: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if self.use_latent:
            h = fuse(h_tilde, z, self.g_h.weight, self.g_h.bias)
            t = fuse(t_tilde, z, self.g_t.weight, self.g_t.bias)
        else:
            h, t = h_tilde, t_tilde
        return transe_distance(h, r_bar.expand_as(h), t)


def rank_from_scores(true_score: float, other_scores: Sequence[float]) -> int:
    """1 + #strictly better + #ties (ties count against the true tail)."""
    return 1 + sum(1 for s in other_scores if s <= true_score)


def rank_candidates(scores: Mapping[int, float], true_tail: int) -> int:
    """Rank of ``true_tail`` among scored candidates (ascending distance)."""
    if not scores:
        raise ValueError("empty candidate pool")
    if true_tail not in scores:
        raise ValueError("true tail must be in the ranking pool")
    target = scores[true_tail]
    return rank_from_scores(target, [s for c, s in scores.items() if c != true_tail])


def hinge_loss(pos_scores: torch.Tensor, neg_scores: torch.Tensor, gamma: float = 1.0) -> torch.Tensor:
    """Mean of ``max(0, gamma - neg + pos)`` over paired distances."""
    pos_scores = torch.as_tensor(pos_scores)
    neg_scores = torch.as_tensor(neg_scores)
    if pos_scores.shape != neg_scores.shape:
        raise ValueError(f"paired scores differ in shape: {tuple(pos_scores.shape)} vs {tuple(neg_scores.shape)}")
    return torch.relu(gamma - neg_scores + pos_scores).mean()


def diffusion_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    if eps_hat.shape != eps.shape:
        raise ValueError(f"shape mismatch {tuple(eps_hat.shape)} vs {tuple(eps.shape)}")
    return ((eps_hat - eps) ** 2).mean()


def total_loss(hinge, diff, lam: float = 1.0):
    return hinge + lam * diff
