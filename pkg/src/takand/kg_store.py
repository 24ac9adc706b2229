"""Knowledge-graph storage, neighborhood indices and few-shot episode sampling.

Datasets follow the NELL-One / Wiki-One layout::

    path_graph            background triples, ``head<TAB>relation<TAB>tail``
    train_tasks.json      {relation: [[head, relation, tail], ...]}
    dev_tasks.json
    test_tasks.json
    rel2candidates.json   {relation: [entity, ...]}

All sampling takes an explicit :class:`numpy.random.Generator` so results are
reproducible given a seed.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

log = logging.getLogger(__name__)

OUT, IN = 0, 1
SELF_LOOP = -1

SPLIT_FILES = {
    "train": "train_tasks.json",
    "valid": "dev_tasks.json",
    "test": "test_tasks.json",
}
GRAPH_FILE = "path_graph"
CANDIDATE_FILE = "rel2candidates.json"

Pair = Tuple[int, int]


class DataError(ValueError):
    """Raised for malformed or inconsistent dataset files."""


@dataclass
class TripleSet:
    triples: List[Tuple[int, int, int]]
    entity_vocab: Dict[str, int]
    relation_vocab: Dict[str, int]

    @property
    def num_entities(self) -> int:
        return len(self.entity_vocab)

    @property
    def num_relations(self) -> int:
        return len(self.relation_vocab)

    def entity_id(self, name: str, add: bool = False) -> int:
        if name not in self.entity_vocab:
            if not add:
                raise KeyError(f"unknown entity {name!r}")
            self.entity_vocab[name] = len(self.entity_vocab)
        return self.entity_vocab[name]

    def relation_id(self, name: str, add: bool = False) -> int:
        if name not in self.relation_vocab:
            if not add:
                raise KeyError(f"unknown relation {name!r}")
            self.relation_vocab[name] = len(self.relation_vocab)
        return self.relation_vocab[name]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)

    def entity_names(self) -> List[str]:
        return _inverse(self.entity_vocab)

    def relation_names(self) -> List[str]:
        return _inverse(self.relation_vocab)

    def vocab_hash(self) -> str:
        """Stable digest of both vocabularies, used to match checkpoints to data."""
        blob = json.dumps([self.entity_vocab, self.relation_vocab], sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _inverse(vocab: Mapping[str, int]) -> List[str]:
    names = [""] * len(vocab)
    for name, idx in vocab.items():
        names[idx] = name
    return names


@dataclass
class NeighborIndex:
    """Per-entity adjacency ``(relation, direction, neighbor)`` over the background graph."""

    neighbors: List[List[Tuple[int, int, int]]]
    max_neighbors: int

    def __getitem__(self, entity: int) -> List[Tuple[int, int, int]]:
        return self.neighbors[entity]

    def __len__(self) -> int:
        return len(self.neighbors)

    def padded(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Dense ``(rel, dir, nbr, mask)`` arrays of shape ``(E, M)``.

        Entities without neighbors get a single self-loop entry with relation
        id ``SELF_LOOP`` so attention always has at least one key.
        """
        n = len(self.neighbors)
        width = max([1] + [len(x) for x in self.neighbors])
        rel = np.full((n, width), SELF_LOOP, dtype=np.int64)
        direction = np.zeros((n, width), dtype=np.int64)
        nbr = np.zeros((n, width), dtype=np.int64)
        mask = np.zeros((n, width), dtype=bool)
        for e, edges in enumerate(self.neighbors):
            if not edges:
                nbr[e, 0] = e
                mask[e, 0] = True
                continue
            for j, (r, d, t) in enumerate(edges):
                rel[e, j], direction[e, j], nbr[e, j] = r, d, t
            mask[e, : len(edges)] = True
        return rel, direction, nbr, mask


@dataclass
class TaskSet:
    split: str
    tasks: Dict[int, List[Pair]]

    @property
    def relations(self) -> List[int]:
        return list(self.tasks)

    def __len__(self) -> int:
        return len(self.tasks)


@dataclass
class CandidateMap:
    candidates: Dict[int, List[int]]
    dropped: int = 0

    def __getitem__(self, relation: int) -> List[int]:
        return self.candidates[relation]

    def __contains__(self, relation: int) -> bool:
        return relation in self.candidates


@dataclass
class Episode:
    relation: int
    support: List[Pair]
    support_neg: List[Pair]
    queries: List[Pair]
    query_neg: List[Pair]
    candidates: List[int] = field(default_factory=list)


@dataclass
class KGData:
    """Everything needed for training and evaluation on one dataset."""

    background: TripleSet
    tasks: Dict[str, TaskSet]
    candidates: CandidateMap
    neighbors: NeighborIndex

    def truth(self, relation: int) -> Dict[int, Set[int]]:
        """All true tails per head for a task relation, across every split."""
        out: Dict[int, Set[int]] = {}
        for ts in self.tasks.values():
            for h, t in ts.tasks.get(relation, ()):
                out.setdefault(h, set()).add(t)
        return out

    def split_of(self, relation: int) -> str:
        for name, ts in self.tasks.items():
            if relation in ts.tasks:
                return name
        raise KeyError(f"relation {relation} is not a task relation")


def load_triples(path) -> TripleSet:
    path = Path(path)
    ts = TripleSet([], {}, {})
    seen: Set[Tuple[int, int, int]] = set()
    nonblank = 0
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            nonblank += 1
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise DataError(f"{path}:{lineno}: expected head<TAB>relation<TAB>tail, got {line!r}")
            h, r, t = (p.strip() for p in parts)
            triple = (ts.entity_id(h, add=True), ts.relation_id(r, add=True), ts.entity_id(t, add=True))
            if triple in seen:
                continue
            seen.add(triple)
            ts.triples.append(triple)
    if nonblank == 0:
        raise DataError(f"{path}: no triples")
    return ts


def build_neighbor_index(ts: TripleSet, max_neighbors: int = 50, rng: Optional[np.random.Generator] = None) -> NeighborIndex:
    if max_neighbors < 1:
        raise ValueError("max_neighbors must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    adj: List[List[Tuple[int, int, int]]] = [[] for _ in range(ts.num_entities)]
    for h, r, t in ts.triples:
        adj[h].append((r, OUT, t))
        adj[t].append((r, IN, h))
    for e, edges in enumerate(adj):
        if len(edges) > max_neighbors:
            keep = np.sort(rng.choice(len(edges), size=max_neighbors, replace=False))
            adj[e] = [edges[i] for i in keep]
    return NeighborIndex(adj, max_neighbors)


def _read_json(path: Path):
    try:
        with path.open(encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


def load_task_partitions(paths: Mapping[str, "str | Path"], ts: TripleSet) -> Dict[str, TaskSet]:
    """Read task files into :class:`TaskSet` objects, registering new names in ``ts``.

    Task relations must not occur in the background graph nor in more than one split.
    """
    background_rels = {r for _, r, _ in ts.triples}
    owner: Dict[str, str] = {}
    out: Dict[str, TaskSet] = {}
    for split, path in paths.items():
        if split not in SPLIT_FILES:
            raise ValueError(f"unknown split {split!r}")
        data = _read_json(Path(path))
        if not isinstance(data, dict):
            raise DataError(f"{path}: expected an object mapping relation to triples")
        tasks: Dict[int, List[Pair]] = {}
        for rel_name, triples in data.items():
            if rel_name in owner:
                raise DataError(f"relation {rel_name!r} appears in both {owner[rel_name]} and {split}")
            owner[rel_name] = split
            if rel_name in ts.relation_vocab and ts.relation_vocab[rel_name] in background_rels:
                raise DataError(f"task relation {rel_name!r} also occurs in the background graph")
            rid = ts.relation_id(rel_name, add=True)
            pairs: List[Pair] = []
            seen: Set[Pair] = set()
            for item in triples:
                if len(item) != 3:
                    raise DataError(f"{path}: relation {rel_name!r} has malformed triple {item!r}")
                pair = (ts.entity_id(item[0], add=True), ts.entity_id(item[2], add=True))
                if pair not in seen:
                    seen.add(pair)
                    pairs.append(pair)
            tasks[rid] = pairs
        out[split] = TaskSet(split, tasks)
    return out


def load_candidates(path, ts: TripleSet) -> CandidateMap:
    data = _read_json(Path(path))
    cmap: Dict[int, List[int]] = {}
    dropped = 0
    for rel_name, names in data.items():
        ids = []
        for name in names:
            if name in ts.entity_vocab:
                ids.append(ts.entity_vocab[name])
            else:
                dropped += 1
        if not ids:
            raise DataError(f"relation {rel_name!r} has no resolvable candidates")
        cmap[ts.relation_id(rel_name, add=True)] = list(dict.fromkeys(ids))
    if dropped:
        log.warning("dropped %d candidate entries naming unknown entities", dropped)
    return CandidateMap(cmap, dropped)


def corrupt_tail(pair: Pair, relation: int, cmap: CandidateMap, truth: Iterable[int], rng: np.random.Generator) -> Pair:
    truth = set(truth)
    feasible = [c for c in cmap[relation] if c not in truth]
    if not feasible:
        raise DataError(f"relation {relation}: no candidate tail outside the true tails for head {pair[0]}")
    return pair[0], feasible[int(rng.integers(len(feasible)))]


def sample_episode(
    tasks: TaskSet,
    relation: int,
    K: int,
    N: int,
    cmap: CandidateMap,
    rng: np.random.Generator,
    truth: Optional[Mapping[int, Set[int]]] = None,
) -> Episode:
    """Draw K support and up to N query pairs without replacement, plus corrupted twins."""
    triples = tasks.tasks[relation]
    if len(triples) < K + 1:
        raise DataError(f"relation {relation} has {len(triples)} triples, need at least K+1={K + 1}")
    if relation not in cmap:
        raise DataError(f"relation {relation} has no candidate list")
    if truth is None:
        truth = {}
        for h, t in triples:
            truth.setdefault(h, set()).add(t)
    order = rng.permutation(len(triples))
    support = [triples[i] for i in order[:K]]
    queries = [triples[i] for i in order[K : K + N]]
    support_neg = [corrupt_tail(p, relation, cmap, truth.get(p[0], ()), rng) for p in support]
    query_neg = [corrupt_tail(p, relation, cmap, truth.get(p[0], ()), rng) for p in queries]
    return Episode(relation, support, support_neg, queries, query_neg, list(cmap[relation]))


def load_dataset(data_dir, max_neighbors: int = 50, seed: int = 0) -> KGData:
    data_dir = Path(data_dir)
    missing = [n for n in [GRAPH_FILE, CANDIDATE_FILE, *SPLIT_FILES.values()] if not (data_dir / n).is_file()]
    if missing:
        raise FileNotFoundError(f"{data_dir}: missing {', '.join(missing)}")
    background = load_triples(data_dir / GRAPH_FILE)
    tasks = load_task_partitions({s: data_dir / f for s, f in SPLIT_FILES.items()}, background)
    cmap = load_candidates(data_dir / CANDIDATE_FILE, background)
    index = build_neighbor_index(background, max_neighbors, np.random.default_rng(seed))
    # task-only entities have no background edges; extend the index to cover them
    index.neighbors.extend([] for _ in range(background.num_entities - len(index.neighbors)))
    return KGData(background, tasks, cmap, index)


def export_vocab(ts: TripleSet, path) -> None:
    path = Path(path)
    path.write_text(json.dumps({"entities": ts.entity_vocab, "relations": ts.relation_vocab}, indent=1))


def import_vocab(path) -> Tuple[Dict[str, int], Dict[str, int]]:
    data = json.loads(Path(path).read_text())
    return dict(data["entities"]), dict(data["relations"])


def write_dataset(
    data_dir,
    background: Sequence[Tuple[str, str, str]],
    tasks: Mapping[str, Mapping[str, Sequence[Tuple[str, str, str]]]],
    candidates: Mapping[str, Sequence[str]],
) -> Path:
    """Write a dataset in the on-disk layout read by :func:`load_dataset`."""
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    with (data_dir / GRAPH_FILE).open("w", encoding="utf-8") as fh:
        for h, r, t in background:
            fh.write(f"{h}\t{r}\t{t}\n")
    for split, fname in SPLIT_FILES.items():
        payload = {rel: [list(x) for x in trs] for rel, trs in tasks.get(split, {}).items()}
        (data_dir / fname).write_text(json.dumps(payload, indent=1))
    (data_dir / CANDIDATE_FILE).write_text(json.dumps({k: list(v) for k, v in candidates.items()}, indent=1))
    return data_dir
