"""TransE embedding table, TransE pretraining and the bilinear relation estimator."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from torch import nn

from .kg_store import TripleSet

log = logging.getLogger(__name__)

# full d*d*d bilinear weights below this size, rank-8 factors at or above it
LOW_RANK_MIN_DIM = 50
LOW_RANK = 8


class EmbeddingTable(nn.Module):
    """Trainable entity and relation matrices."""

    def __init__(self, entity: torch.Tensor, relation: torch.Tensor):
        super().__init__()
        if entity.ndim != 2 or relation.ndim != 2 or entity.shape[1] != relation.shape[1]:
            raise ValueError(f"incompatible embedding shapes {tuple(entity.shape)} and {tuple(relation.shape)}")
        if not (torch.isfinite(entity).all() and torch.isfinite(relation).all()):
            raise ValueError("embeddings contain non-finite values")
        self.entity = nn.Parameter(entity.clone())
        self.relation = nn.Parameter(relation.clone())
        self.history: List[dict] = []

    @property
    def dim(self) -> int:
        return self.entity.shape[1]

    @property
    def num_entities(self) -> int:
        return self.entity.shape[0]

    @property
    def num_relations(self) -> int:
        return self.relation.shape[0]

    @classmethod
    def random(cls, num_entities: int, num_relations: int, dim: int, rng: np.random.Generator, dtype=torch.float32):
        bound = 6.0 / math.sqrt(dim)
        ent = rng.uniform(-bound, bound, size=(num_entities, dim))
        rel = rng.uniform(-bound, bound, size=(num_relations, dim))
        rel /= np.linalg.norm(rel, axis=1, keepdims=True)
        return cls(torch.as_tensor(ent, dtype=dtype), torch.as_tensor(rel, dtype=dtype))


def transe_distance(h: torch.Tensor, r: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """L2 TransE distance ``||h + r - t||`` over the last axis."""
    if h.shape[-1] != r.shape[-1] or r.shape[-1] != t.shape[-1]:
        raise ValueError("dimension mismatch")
    return torch.linalg.vector_norm(h + r - t, dim=-1)


def transe_margin_loss(entity: torch.Tensor, relation: torch.Tensor, pos: torch.Tensor, neg: torch.Tensor, margin: float) -> torch.Tensor:
    d_pos = transe_distance(entity[pos[:, 0]], relation[pos[:, 1]], entity[pos[:, 2]])
    d_neg = transe_distance(entity[neg[:, 0]], relation[neg[:, 1]], entity[neg[:, 2]])
    return torch.relu(margin + d_pos - d_neg).mean()


def corrupt_triples(triples: np.ndarray, num_entities: int, rng: np.random.Generator) -> np.ndarray:
    """Replace head or tail (coin flip) with a uniformly drawn different entity."""
    neg = triples.copy()
    side = np.where(rng.random(len(triples)) < 0.5, 0, 2)
    # draw from num_entities - 1 values and skip over the original id
    draw = rng.integers(0, max(num_entities - 1, 1), size=len(triples))
    orig = neg[np.arange(len(neg)), side]
    draw = draw + (draw >= orig)
    if num_entities == 1:
        draw = orig
    neg[np.arange(len(neg)), side] = draw
    return neg


def pretrain_transe(
    ts: TripleSet,
    dim: int,
    epochs: int = 100,
    margin: float = 1.0,
    lr: float = 0.01,
    rng: Optional[np.random.Generator] = None,
    batch_size: int = 1024,
    dtype=torch.float32,
) -> EmbeddingTable:
    """Margin-ranking TransE with plain SGD.

    Entity rows are renormalized to unit length at the start of every epoch.
    Per-epoch ``{"epoch", "loss", "pos_distance"}`` records land in ``table.history``.
    """
    if not ts.triples:
        raise ValueError("cannot pretrain on an empty triple set")
    rng = rng if rng is not None else np.random.default_rng(0)
    table = EmbeddingTable.random(ts.num_entities, ts.num_relations, dim, rng, dtype=dtype)
    triples = ts.as_array()
    opt = torch.optim.SGD(table.parameters(), lr=lr)
    for epoch in range(epochs):
        with torch.no_grad():
            table.entity /= table.entity.norm(dim=1, keepdim=True).clamp_min(1e-12)
        order = rng.permutation(len(triples))
        total = 0.0
        for start in range(0, len(order), batch_size):
            pos = triples[order[start : start + batch_size]]
            neg = corrupt_triples(pos, ts.num_entities, rng)
            loss = transe_margin_loss(table.entity, table.relation, torch.as_tensor(pos), torch.as_tensor(neg), margin)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(pos)
        with torch.no_grad():
            t = torch.as_tensor(triples)
            pos_d = transe_distance(table.entity[t[:, 0]], table.relation[t[:, 1]], table.entity[t[:, 2]]).mean().item()
        table.history.append({"epoch": epoch, "loss": total / len(triples), "pos_distance": pos_d})
    log.info("TransE pretraining done: final loss %.4f", table.history[-1]["loss"] if table.history else float("nan"))
    return table


def load_matrix(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        mat = np.load(path)
    else:
        mat = np.loadtxt(path, dtype=np.float64, ndmin=2)
    return np.asarray(mat, dtype=np.float64)


def import_pretrained(entity_path, relation_path, num_entities: int, num_relations: int, dim: Optional[int] = None, dtype=torch.float32) -> EmbeddingTable:
    """Load entity/relation matrices whose rows follow the vocabulary ids.

    Files may hold fewer rows than the vocabulary (entities that only occur in
    task files); missing rows are filled with small random vectors.
    """
    ent = load_matrix(entity_path)
    rel = load_matrix(relation_path)
    for name, mat in (("entity", ent), ("relation", rel)):
        if dim is not None and mat.shape[1] != dim:
            raise ValueError(f"{name} embedding width {mat.shape[1]} does not match expected d={dim}")
    if ent.shape[1] != rel.shape[1]:
        raise ValueError(f"entity width {ent.shape[1]} != relation width {rel.shape[1]}")
    if ent.shape[0] > num_entities or rel.shape[0] > num_relations:
        raise ValueError("embedding file has more rows than the vocabulary")
    ent = _pad_rows(ent, num_entities)
    rel = _pad_rows(rel, num_relations)
    return EmbeddingTable(torch.as_tensor(ent, dtype=dtype), torch.as_tensor(rel, dtype=dtype))


def _pad_rows(mat: np.ndarray, rows: int) -> np.ndarray:
    if mat.shape[0] == rows:
        return mat
    rng = np.random.default_rng(mat.shape[0])
    extra = rng.normal(scale=1.0 / math.sqrt(mat.shape[1]), size=(rows - mat.shape[0], mat.shape[1]))
    return np.concatenate([mat, extra])


def export_embeddings(table: EmbeddingTable, directory, vocab_hash: str = "") -> Path:
    """Write ``entity.npy``, ``relation.npy`` and a JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ent = table.entity.detach().cpu().numpy()
    rel = table.relation.detach().cpu().numpy()
    np.save(directory / "entity.npy", ent)
    np.save(directory / "relation.npy", rel)
    meta = {
        "dim": table.dim,
        "entity_count": table.num_entities,
        "relation_count": table.num_relations,
        "vocab_hash": vocab_hash,
        "dtype": str(ent.dtype),
    }
    (directory / "embeddings.json").write_text(json.dumps(meta, indent=1))
    return directory


def load_embeddings(directory, expect_hash: Optional[str] = None) -> EmbeddingTable:
    directory = Path(directory)
    meta = json.loads((directory / "embeddings.json").read_text())
    if expect_hash and meta.get("vocab_hash") and meta["vocab_hash"] != expect_hash:
        raise ValueError(f"embedding vocab hash {meta['vocab_hash']} does not match data {expect_hash}")
    ent = np.load(directory / "entity.npy")
    rel = np.load(directory / "relation.npy")
    if ent.shape != (meta["entity_count"], meta["dim"]) or rel.shape != (meta["relation_count"], meta["dim"]):
        raise ValueError("embedding files disagree with their sidecar")
    return EmbeddingTable(torch.from_numpy(ent), torch.from_numpy(rel))


def bilinear_relation(h: torch.Tensor, t: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """``out_k = h^T W_k t + b_k`` with ``weight`` of shape ``(d_out, d, d)``."""
    out = torch.einsum("...i,kij,...j->...k", h, weight, t)
    return out if bias is None else out + bias


class BilinearRelation(nn.Module):
    """Bilinear map from a (head, tail) pair to a relation vector.

    With ``rank`` set each slice is factorized as ``W_k = U_k V_k^T``.
    ``rank=None`` picks the full form for ``d < 50`` and rank 8 otherwise.
    """

    def __init__(self, dim: int, rank: Optional[int] = None):
        super().__init__()
        if rank is None:
            rank = LOW_RANK if dim >= LOW_RANK_MIN_DIM else 0
        self.dim = dim
        self.rank = rank
        bound = 1.0 / math.sqrt(dim)
        if rank:
            self.u = nn.Parameter(torch.empty(dim, dim, rank).uniform_(-bound, bound))
            self.v = nn.Parameter(torch.empty(dim, dim, rank).uniform_(-bound, bound))
        else:
            self.weight = nn.Parameter(torch.empty(dim, dim, dim).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(dim))

    def full_weight(self) -> torch.Tensor:
        if self.rank:
            return torch.einsum("kir,kjr->kij", self.u, self.v)
        return self.weight

    def forward(self, h: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if self.rank:
            hu = torch.einsum("...i,kir->...kr", h, self.u)
            tv = torch.einsum("...j,kjr->...kr", t, self.v)
            return (hu * tv).sum(-1) + self.bias
        return bilinear_relation(h, t, self.weight, self.bias)
