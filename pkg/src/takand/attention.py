"""Two-stage neighbor attention over entity pairs and task-relation extraction.

For a pair ``(h, t)`` the relation it expresses is estimated bilinearly from the
raw embeddings. Stage one attends over each entity's neighbors keyed by the
neighbor *relations* with that estimate as query; stage two re-attends keyed by
the neighbor *entities*, queried with the other side's stage-one output. Each
stage is folded back into the entity through a gated residual.

Batched tensors use the layout ``(B, M, d)`` for neighbor lists with a boolean
``(B, M)`` mask; every row must have at least one unmasked neighbor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import nn

from .embedding import BilinearRelation


class Neighbors(NamedTuple):
    relation: torch.Tensor  # (B, M, d) signed relation vectors, zero for self-loops
    entity: torch.Tensor  # (B, M, d)
    mask: torch.Tensor  # (B, M) bool


@dataclass
class EnhancedPair:
    h_tilde: torch.Tensor
    t_tilde: torch.Tensor


def encode_neighbor(r_i: torch.Tensor, n_i: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, act=torch.tanh) -> torch.Tensor:
    """``act(W [r_i; n_i] + b)``."""
    return act(F.linear(torch.cat([r_i, n_i], dim=-1), weight, bias))


def attention_weights(query: torch.Tensor, keys: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Single-head softmax weights with unscaled dot-product logits.

    ``query`` is ``(..., d)`` and ``keys`` is ``(..., M, d)``.
    """
    logits = torch.einsum("...d,...md->...m", query, keys)
    if mask is not None:
        if not bool(mask.any(-1).all()):
            raise ValueError("attention needs at least one neighbor per row")
        logits = logits.masked_fill(~mask, float("-inf"))
    elif keys.shape[-2] == 0:
        raise ValueError("attention needs at least one neighbor")
    return torch.softmax(logits, dim=-1)


def attend(query, keys, values, mask=None) -> torch.Tensor:
    w = attention_weights(query, keys, mask)
    return torch.einsum("...m,...md->...d", w, values)


def gated_couple(x: torch.Tensor, x_nbr: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """``g * x + (1 - g) * x_nbr`` with ``g = sigmoid(W [x; x_nbr] + b)``."""
    g = torch.sigmoid(F.linear(torch.cat([x, x_nbr], dim=-1), weight, bias))
    return g * x + (1.0 - g) * x_nbr


def _gate(dim: int, bias: float) -> nn.Linear:
    gate = nn.Linear(2 * dim, dim)
    nn.init.constant_(gate.bias, bias)
    return gate


class TwoStageEnhancer(nn.Module):
    def __init__(self, dim: int, bilinear_rank: Optional[int] = None, gate_bias: float = 0.0):
        super().__init__()
        self.dim = dim
        self.bilinear = BilinearRelation(dim, bilinear_rank)
        self.neighbor_encoder = nn.Linear(2 * dim, dim)
        self.q1 = nn.Linear(dim, dim, bias=False)
        self.k1 = nn.Linear(dim, dim, bias=False)
        self.v1 = nn.Linear(dim, dim, bias=False)
        self.q2 = nn.Linear(dim, dim, bias=False)
        self.k2 = nn.Linear(dim, dim, bias=False)
        self.v2 = nn.Linear(dim, dim, bias=False)
        self.gate = _gate(dim, gate_bias)
        self.task_relation = TaskRelationExtractor(dim)

    def encode_neighbors(self, nb: Neighbors) -> torch.Tensor:
        return encode_neighbor(nb.relation, nb.entity, self.neighbor_encoder.weight, self.neighbor_encoder.bias)

    def couple(self, x, x_nbr):
        return gated_couple(x, x_nbr, self.gate.weight, self.gate.bias)

    def stage1(self, r: torch.Tensor, nb: Neighbors, enc: torch.Tensor) -> torch.Tensor:
        return attend(self.q1(r), self.k1(nb.relation), self.v1(enc), nb.mask)

    def stage2(self, query: torch.Tensor, nb: Neighbors, enc: torch.Tensor) -> torch.Tensor:
        return attend(self.q2(query), self.k2(nb.entity), self.v2(enc), nb.mask)

    def forward(self, h: torch.Tensor, t: torch.Tensor, h_nb: Neighbors, t_nb: Neighbors) -> EnhancedPair:
        r = self.bilinear(h, t)
        h_enc = self.encode_neighbors(h_nb)
        t_enc = self.encode_neighbors(t_nb)
        h_r = self.couple(h, self.stage1(r, h_nb, h_enc))
        t_r = self.couple(t, self.stage1(r, t_nb, t_enc))
        h_tilde = self.couple(h_r, self.stage2(t_r, h_nb, h_enc))
        t_tilde = self.couple(t_r, self.stage2(h_r, t_nb, t_enc))
        return EnhancedPair(h_tilde, t_tilde)

    def relation_of(self, pairs: EnhancedPair) -> torch.Tensor:
        return self.task_relation(self.bilinear(pairs.h_tilde, pairs.t_tilde))


class MeanCouplingEnhancer(nn.Module):
    """Ablation enhancer: neighbor entities averaged without learned encoding or attention."""

    def __init__(self, dim: int, bilinear_rank: Optional[int] = None, gate_bias: float = 0.0):
        super().__init__()
        self.dim = dim
        self.bilinear = BilinearRelation(dim, bilinear_rank)
        self.gate = _gate(dim, gate_bias)
        self.task_relation = TaskRelationExtractor(dim)

    @staticmethod
    def _mean(nb: Neighbors) -> torch.Tensor:
        m = nb.mask.to(nb.entity.dtype).unsqueeze(-1)
        return (nb.entity * m).sum(-2) / m.sum(-2)

    def forward(self, h, t, h_nb: Neighbors, t_nb: Neighbors) -> EnhancedPair:
        h_tilde = gated_couple(h, self._mean(h_nb), self.gate.weight, self.gate.bias)
        t_tilde = gated_couple(t, self._mean(t_nb), self.gate.weight, self.gate.bias)
        return EnhancedPair(h_tilde, t_tilde)

    def relation_of(self, pairs: EnhancedPair) -> torch.Tensor:
        return self.task_relation(self.bilinear(pairs.h_tilde, pairs.t_tilde))


class TaskRelationExtractor(nn.Module):
    """Aggregate per-pair relation estimates, disentangle into two halves, compress back.

    Aggregation is a mean over the support pairs, so the result does not depend
    on their order.
    """

    def __init__(self, dim: int):
        super().__init__()
        half_a = dim // 2 or 1
        half_b = max(dim - half_a, 1)
        self.split_a = nn.Linear(dim, half_a)
        self.split_b = nn.Linear(dim, half_b)
        self.ff_a = nn.Sequential(nn.Linear(half_a, half_a), nn.SiLU(), nn.Linear(half_a, half_a))
        self.ff_b = nn.Sequential(nn.Linear(half_b, half_b), nn.SiLU(), nn.Linear(half_b, half_b))
        self.compress = nn.Linear(half_a + half_b, dim)

    def forward(self, pair_relations: torch.Tensor) -> torch.Tensor:
        """``pair_relations``: ``(K, d)`` bilinear outputs of the enhanced support pairs."""
        if pair_relations.shape[-2] == 0:
            raise ValueError("task relation needs at least one support pair")
        agg = pair_relations.mean(dim=-2)
        a = self.ff_a(self.split_a(agg))
        b = self.ff_b(self.split_b(agg))
        return torch.tanh(self.compress(torch.cat([a, b], dim=-1)))


def self_loop_neighbors(x: torch.Tensor) -> Neighbors:
    """One synthetic neighbor per row: zero relation, the entity itself."""
    return Neighbors(torch.zeros_like(x).unsqueeze(-2), x.unsqueeze(-2), torch.ones(x.shape[:-1] + (1,), dtype=torch.bool))
