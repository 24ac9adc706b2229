"""Model assembly, episodic training, checkpoints and ranking evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from . import kg_store
from .attention import EnhancedPair, MeanCouplingEnhancer, Neighbors, TwoStageEnhancer
from .diffusion import (
    UKanDenoiser,
    build_z0,
    cosine_schedule,
    estimate_z0,
    extract_latent_rule,
    film_condition,
    forward_noise,
    reverse_sample,
)
from .embedding import EmbeddingTable, pretrain_transe
from .kg_store import DataError, Episode, KGData, TaskSet
from .scorer import Scorer, diffusion_loss, hinge_loss, rank_from_scores, total_loss

log = logging.getLogger(__name__)

VARIANTS = ("full", "V1", "V2", "V3")
CHECKPOINT_FORMAT = "takand-checkpoint/1"

# published numbers kept for reference only; nothing here reproduces them
REFERENCE_BASELINES = {"ReCDAP": {"nell_mrr": 0.505}}

DATASET_PRESETS = {
    "nell": {"dim": 100, "lr": 1e-3},
    "wiki": {"dim": 50, "lr": 1e-4},
}


@dataclass
class TrainConfig:
    k_shot: int = 5
    n_query: Optional[int] = None  # defaults to k_shot
    margin: float = 1.0
    timesteps: int = 1000
    lr: float = 1e-3
    dim: int = 100
    steps: int = 10000
    eval_interval: int = 500
    patience: int = 10
    seed: int = 0
    variant: str = "full"
    max_neighbors: int = 50
    bilinear_rank: Optional[int] = None
    channels: Tuple[int, ...] = (64, 128)
    label_dim: int = 8
    kan_grid: int = 5
    kan_order: int = 3
    diffusion_weight: float = 1.0
    sample_steps: int = 50
    x0_clip: Optional[float] = 3.0
    fuse_latent: bool = True
    gate_bias: float = 0.0
    finetune_embeddings: bool = True
    eval_max_queries: Optional[int] = None
    average: str = "micro"
    dtype: str = "float32"
    transe_epochs: int = 100
    transe_lr: float = 0.01
    transe_margin: float = 1.0
    transe_batch_size: int = 1024

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("k_shot", "timesteps", "dim", "eval_interval", "patience", "max_neighbors", "sample_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0 or self.lr <= 0 or self.margin < 0:
            raise ValueError("steps must be >= 0, lr > 0 and margin >= 0")
        if self.sample_steps > self.timesteps:
            raise ValueError("sample_steps cannot exceed timesteps")
        if self.average not in ("micro", "macro"):
            raise ValueError("average must be 'micro' or 'macro'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def queries_per_step(self) -> int:
        return self.n_query or self.k_shot

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    @classmethod
    def for_dataset(cls, name: str, **overrides) -> "TrainConfig":
        return cls(**{**DATASET_PRESETS[name.lower()], **overrides})

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)


@dataclass
class EpisodeBatch:
    """Index tensors for one episode."""

    support: torch.Tensor  # (K, 2)
    support_neg: torch.Tensor
    queries: torch.Tensor  # (N, 2)
    query_neg: torch.Tensor

    @classmethod
    def from_episode(cls, ep: Episode) -> "EpisodeBatch":
        def t(pairs):
            return torch.as_tensor(pairs, dtype=torch.long).reshape(-1, 2)

        return cls(t(ep.support), t(ep.support_neg), t(ep.queries), t(ep.query_neg))


class NeuralProcessStub(nn.Module):
    """Placeholder for the neural-process latent learner ablation; not implemented."""

    def forward(self, *args, **kwargs):
        raise NotImplementedError("variant V2 (neural-process latent learner) is not implemented")


class FewShotModel(nn.Module):
    def __init__(self, config: TrainConfig, embeddings: EmbeddingTable, neighbors: kg_store.NeighborIndex):
        super().__init__()
        if embeddings.dim != config.dim:
            raise ValueError(f"embedding dim {embeddings.dim} does not match config dim {config.dim}")
        if config.variant == "V2":
            raise NotImplementedError("variant V2 (neural-process latent learner) is a stub and cannot be built")
        self.config = config
        d = config.dim
        self.embeddings = embeddings
        self.embeddings.requires_grad_(config.finetune_embeddings)
        enhancer_cls = MeanCouplingEnhancer if config.variant == "V1" else TwoStageEnhancer
        self.enhancer = enhancer_cls(d, config.bilinear_rank, config.gate_bias)
        self.denoiser = UKanDenoiser(
            2 * d,
            5 * d,
            config.channels,
            config.label_dim,
            use_kan=config.variant != "V3",
            kan_grid=config.kan_grid,
            kan_order=config.kan_order,
        )
        self.scorer = Scorer(d, 4 * d, use_latent=config.fuse_latent)
        rel, direction, nbr, mask = neighbors.padded()
        if rel.shape[0] < embeddings.num_entities:
            raise ValueError("neighbor index does not cover every entity")
        self.register_buffer("nbr_rel", torch.as_tensor(rel), persistent=False)
        self.register_buffer("nbr_dir", torch.as_tensor(direction), persistent=False)
        self.register_buffer("nbr_ent", torch.as_tensor(nbr), persistent=False)
        self.register_buffer("nbr_mask", torch.as_tensor(mask), persistent=False)
        self.schedule = cosine_schedule(config.timesteps)
        self.to(config.torch_dtype)

    def neighbors(self, ids: torch.Tensor) -> Neighbors:
        rel_ids = self.nbr_rel[ids]
        self_loop = rel_ids < 0
        rel_vec = self.embeddings.relation[rel_ids.clamp_min(0)]
        sign = torch.where(self.nbr_dir[ids] == kg_store.IN, -1.0, 1.0).to(rel_vec.dtype)
        sign = sign.masked_fill(self_loop, 0.0)
        return Neighbors(rel_vec * sign.unsqueeze(-1), self.embeddings.entity[self.nbr_ent[ids]], self.nbr_mask[ids])

    def enhance(self, heads: torch.Tensor, tails: torch.Tensor) -> EnhancedPair:
        n = self.embeddings.num_entities
        if bool((heads < 0).any() | (heads >= n).any() | (tails < 0).any() | (tails >= n).any()):
            raise IndexError("entity id outside the embedding table")
        ent = self.embeddings.entity
        return self.enhancer(ent[heads], ent[tails], self.neighbors(heads), self.neighbors(tails))

    def support_context(self, support: torch.Tensor, support_neg: torch.Tensor):
        both = torch.cat([support, support_neg])
        pairs = self.enhance(both[:, 0], both[:, 1])
        k = len(support)
        sup = EnhancedPair(pairs.h_tilde[:k], pairs.t_tilde[:k])
        neg = EnhancedPair(pairs.h_tilde[k:], pairs.t_tilde[k:])
        r_bar = self.enhancer.relation_of(sup)
        return sup, neg, r_bar, film_condition(r_bar, sup, neg)

    def episode_loss(self, batch: EpisodeBatch, t: int, eps: torch.Tensor) -> Dict[str, torch.Tensor]:
        """Joint loss for one episode given the diffusion timestep and noise draw."""
        cfg = self.config
        sup, neg, r_bar, cond = self.support_context(batch.support, batch.support_neg)
        z0 = build_z0(sup, neg).tokens
        z_t = forward_noise(z0, t, eps, self.schedule)
        eps_hat = self.denoiser(z_t, t, cond)
        z = extract_latent_rule(estimate_z0(z_t, t, eps_hat, self.schedule, cfg.x0_clip))
        q = torch.cat([batch.queries, batch.query_neg])
        scored = self.enhance(q[:, 0], q[:, 1])
        dist = self.scorer(scored.h_tilde, r_bar, scored.t_tilde, z)
        n = len(batch.queries)
        hinge = hinge_loss(dist[:n], dist[n:], cfg.margin)
        diff = diffusion_loss(eps_hat, eps)
        return {"loss": total_loss(hinge, diff, cfg.diffusion_weight), "hinge": hinge, "diffusion": diff}

    @torch.no_grad()
    def latent_rule(self, support: torch.Tensor, support_neg: torch.Tensor, generator: torch.Generator):
        """Task relation and a sampled latent rule for evaluation."""
        sup, neg, r_bar, cond = self.support_context(support, support_neg)
        shape = (1, 2 * len(support), 2 * self.config.dim)
        cond1 = type(cond)(cond.r_bar.unsqueeze(0), cond.pos_summary.unsqueeze(0), cond.neg_summary.unsqueeze(0), cond.labels.unsqueeze(0))
        grid = reverse_sample(
            self.denoiser, cond1, self.schedule, self.config.sample_steps, shape, generator, self.config.x0_clip, self.config.torch_dtype
        )
        return r_bar, extract_latent_rule(grid[0])

    @torch.no_grad()
    def score_pairs(self, heads: torch.Tensor, tails: torch.Tensor, r_bar: torch.Tensor, z: torch.Tensor, chunk: int = 4096) -> torch.Tensor:
        out = []
        for start in range(0, len(heads), chunk):
            p = self.enhance(heads[start : start + chunk], tails[start : start + chunk])
            out.append(self.scorer(p.h_tilde, r_bar, p.t_tilde, z))
        return torch.cat(out) if out else torch.zeros(0)


def build_model(config: TrainConfig, data: KGData, embeddings: Optional[EmbeddingTable] = None) -> FewShotModel:
    """Construct a model; TransE embeddings are pretrained on the background graph if not supplied."""
    if embeddings is None:
        embeddings = pretrain_transe(
            data.background,
            config.dim,
            config.transe_epochs,
            config.transe_margin,
            config.transe_lr,
            np.random.default_rng(config.seed),
            config.transe_batch_size,
        )
    else:
        embeddings = EmbeddingTable(embeddings.entity.detach(), embeddings.relation.detach())
    if embeddings.num_entities < data.background.num_entities:
        raise ValueError("embedding table has fewer rows than the entity vocabulary")
    torch.manual_seed(config.seed)
    return FewShotModel(config, embeddings, data.neighbors)


# --------------------------------------------------------------------------- metrics


def mrr(ranks: Sequence[int]) -> float:
    if len(ranks) == 0:
        raise ValueError("no ranks")
    return float(sum(1.0 / r for r in ranks) / len(ranks))


def hits_at(ranks: Sequence[int], n: int) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(ranks) == 0:
        raise ValueError("no ranks")
    return float(sum(1 for r in ranks if r <= n) / len(ranks))


@dataclass
class MetricsReport:
    mrr: float
    hits1: float
    hits5: float
    hits10: float
    n_queries: int
    per_relation: Dict[str, dict] = field(default_factory=dict)

    @classmethod
    def from_ranks(cls, ranks: Sequence[int], per_relation: Optional[Dict[str, dict]] = None, average: str = "micro"):
        if average == "macro" and per_relation:
            rows = list(per_relation.values())
            mean = lambda key: float(np.mean([r[key] for r in rows]))  # noqa: E731
            return cls(mean("mrr"), mean("hits1"), mean("hits5"), mean("hits10"), len(ranks), per_relation or {})
        return cls(mrr(ranks), hits_at(ranks, 1), hits_at(ranks, 5), hits_at(ranks, 10), len(ranks), per_relation or {})

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# --------------------------------------------------------------------------- evaluation


def evaluation_episode(tasks: TaskSet, relation: int, K: int, cmap, truth, seed: int, max_queries: Optional[int] = None):
    """Seeded support choice for evaluation: first K of a shuffled order, the rest are queries."""
    triples = tasks.tasks[relation]
    if len(triples) < K + 1:
        raise DataError(f"relation {relation} has {len(triples)} triples, need at least K+1={K + 1}")
    if relation not in cmap:
        raise DataError(f"relation {relation} has no candidate list")
    rng = np.random.default_rng([seed, relation])
    order = rng.permutation(len(triples))
    support = [triples[i] for i in order[:K]]
    queries = [triples[i] for i in order[K:]]
    if max_queries is not None:
        queries = queries[:max_queries]
    support_neg = [kg_store.corrupt_tail(p, relation, cmap, truth.get(p[0], ()), rng) for p in support]
    return support, support_neg, queries


def candidate_pool(true_tail: int, candidates: Sequence[int], true_tails: set) -> List[int]:
    """The true tail plus every candidate that is not another true tail of the same head."""
    return [true_tail] + [c for c in candidates if c != true_tail and c not in true_tails]


def evaluate(model: FewShotModel, data: KGData, split: str, K: Optional[int] = None, seed: int = 0) -> MetricsReport:
    cfg = model.config
    K = K or cfg.k_shot
    tasks = data.tasks[split]
    names = data.background.relation_names()
    was_training = model.training
    model.eval()
    ranks: List[int] = []
    per_relation: Dict[str, dict] = {}
    for relation in sorted(tasks.relations):
        truth = data.truth(relation)
        support, support_neg, queries = evaluation_episode(tasks, relation, K, data.candidates, truth, seed, cfg.eval_max_queries)
        gen = torch.Generator().manual_seed(seed * 1_000_003 + relation)
        r_bar, z = model.latent_rule(torch.as_tensor(support), torch.as_tensor(support_neg), gen)
        rel_ranks = []
        for h, t in queries:
            pool = candidate_pool(t, data.candidates[relation], truth.get(h, set()))
            heads = torch.full((len(pool),), h, dtype=torch.long)
            scores = model.score_pairs(heads, torch.as_tensor(pool), r_bar, z).tolist()
            rel_ranks.append(rank_from_scores(scores[0], scores[1:]))
        ranks.extend(rel_ranks)
        if rel_ranks:
            per_relation[names[relation]] = {
                "mrr": mrr(rel_ranks),
                "hits1": hits_at(rel_ranks, 1),
                "hits5": hits_at(rel_ranks, 5),
                "hits10": hits_at(rel_ranks, 10),
                "n_queries": len(rel_ranks),
            }
    model.train(was_training)
    return MetricsReport.from_ranks(ranks, per_relation, cfg.average)


# --------------------------------------------------------------------------- training


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: FewShotModel
    losses: List[dict]
    evals: List[dict]
    best_step: int


def trainable_relations(tasks: TaskSet, K: int) -> List[int]:
    rels = [r for r in sorted(tasks.relations) if len(tasks.tasks[r]) >= K + 1]
    if not rels:
        raise DataError(f"no training relation has at least K+1={K + 1} triples")
    return rels


def train(
    config: TrainConfig,
    data: KGData,
    embeddings: Optional[EmbeddingTable] = None,
    out_dir=None,
    model: Optional[FewShotModel] = None,
    valid_split: Optional[str] = "valid",
) -> TrainResult:
    """Episodic training with Adam; keeps the parameters with the best validation MRR.

    Validation runs every ``eval_interval`` steps when the split has relations;
    training stops after ``patience`` evaluations without improvement.
    """
    model = model if model is not None else build_model(config, data, embeddings)
    out_dir = Path(out_dir) if out_dir is not None else None
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    tasks = data.tasks["train"]
    relations = trainable_relations(tasks, config.k_shot)
    truths = {r: data.truth(r) for r in relations}
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr)
    has_valid = valid_split is not None and valid_split in data.tasks and len(data.tasks[valid_split]) > 0
    losses: List[dict] = []
    evals: List[dict] = []
    best_mrr, best_step, stale = -math.inf, 0, 0
    best_state = _clone_state(model)
    model.train()
    for step in range(1, config.steps + 1):
        relation = relations[int(rng.integers(len(relations)))]
        ep = kg_store.sample_episode(tasks, relation, config.k_shot, config.queries_per_step, data.candidates, rng, truths[relation])
        batch = EpisodeBatch.from_episode(ep)
        t = int(torch.randint(1, config.timesteps + 1, (1,), generator=gen))
        eps = torch.randn((2 * config.k_shot, 2 * config.dim), generator=gen, dtype=config.torch_dtype)
        out = model.episode_loss(batch, t, eps)
        if not torch.isfinite(out["loss"]):
            _dump_episode(out_dir, step, ep, t, out)
            raise TrainingError(f"non-finite loss at step {step} (relation {relation}, t={t})")
        opt.zero_grad()
        out["loss"].backward()
        opt.step()
        losses.append({"step": step, "t": t, **{k: float(v.detach()) for k, v in out.items()}})
        if has_valid and step % config.eval_interval == 0:
            report = evaluate(model, data, valid_split, config.k_shot, config.seed)
            evals.append({"step": step, "mrr": report.mrr, "hits1": report.hits1, "hits10": report.hits10})
            log.info("step %d: loss %.4f valid MRR %.4f", step, losses[-1]["loss"], report.mrr)
            if report.mrr > best_mrr:
                best_mrr, best_step, stale = report.mrr, step, 0
                best_state = _clone_state(model)
                if out_dir is not None:
                    save_checkpoint(out_dir / "best.pt", model, data, losses)
            else:
                stale += 1
                if stale >= config.patience:
                    log.info("early stop at step %d (best %d)", step, best_step)
                    break
    if has_valid and evals:
        model.load_state_dict(best_state)
    else:
        best_step = len(losses)
    return TrainResult(model, losses, evals, best_step)


def _clone_state(model: nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _dump_episode(out_dir, step, ep: Episode, t, out) -> None:
    payload = {"step": step, "t": t, "episode": asdict(ep), "losses": {k: float(v.detach()) for k, v in out.items()}}
    log.error("non-finite loss: %s", json.dumps(payload))
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"nonfinite_step{step}.json").write_text(json.dumps(payload, indent=1))


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: FewShotModel, data: KGData, losses: Optional[List[dict]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(model.config),
            "state": model.state_dict(),
            "vocab_hash": data.background.vocab_hash(),
            "num_entities": model.embeddings.num_entities,
            "num_relations": model.embeddings.num_relations,
            "schedule": model.schedule.constants(),
            "losses": losses or [],
        },
        path,
    )
    return path


def load_checkpoint(path, data: KGData) -> FewShotModel:
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a model checkpoint")
    if ckpt["vocab_hash"] != data.background.vocab_hash():
        raise ValueError(f"{path}: checkpoint vocabulary does not match the dataset")
    config = TrainConfig.from_dict(ckpt["config"])
    dtype = config.torch_dtype
    placeholder = EmbeddingTable(
        torch.zeros(ckpt["num_entities"], config.dim, dtype=dtype), torch.zeros(ckpt["num_relations"], config.dim, dtype=dtype)
    )
    model = FewShotModel(config, placeholder, data.neighbors)
    model.load_state_dict(ckpt["state"])
    return model
