"""Small rule-based knowledge graph for end-to-end checks.

Objects carry four categorical attributes (color, shape, size, material), each
stored as a background edge to an attribute-value entity. Every task relation
maps an object to the value of one attribute, so its tail is a deterministic
function of the head's background neighborhood.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import kg_store
from .kg_store import KGData

ATTRIBUTES = ("color", "shape", "size", "material")
# task relation -> attribute it reads
TASK_RELATIONS = {"looks": "color", "formed_as": "shape", "made_of": "material"}
HELDOUT_SUFFIX = "@heldout"


def generate(
    num_objects: int = 24,
    values_per_attribute: int = 4,
    seed: int = 0,
    train_fraction: float = 0.5,
) -> Tuple[List[Tuple[str, str, str]], Dict[str, Dict[str, list]], Dict[str, List[str]]]:
    """Background triples, task partitions and candidate lists as named triples.

    With the defaults there are ``24 + 4 * 4 = 40`` entities, 4 background
    relations and 3 task relations. Objects are split once: the training
    split holds each task relation's triples for the first part of the
    objects, the test split holds a copy of each relation (named with
    ``HELDOUT_SUFFIX``) over the remaining, unseen objects. The model never
    looks at task relation ids, so the copies only keep splits relation-disjoint.
    """
    rng = np.random.default_rng(seed)
    objects = [f"obj{i:02d}" for i in range(num_objects)]
    values = {a: [f"{a}{j}" for j in range(values_per_attribute)] for a in ATTRIBUTES}
    # balanced random assignment: each value used equally often per attribute
    assign = {a: rng.permutation(np.arange(num_objects) % values_per_attribute) for a in ATTRIBUTES}
    background = [(o, f"has_{a}", values[a][assign[a][i]]) for i, o in enumerate(objects) for a in ATTRIBUTES]
    order = rng.permutation(num_objects)
    n_train = int(round(train_fraction * num_objects))
    groups = {"train": sorted(order[:n_train]), "test": sorted(order[n_train:])}
    tasks: Dict[str, Dict[str, list]] = {"train": {}, "valid": {}, "test": {}}
    candidates: Dict[str, List[str]] = {}
    for rel, attr in TASK_RELATIONS.items():
        for split, suffix in (("train", ""), ("test", HELDOUT_SUFFIX)):
            name = rel + suffix
            tasks[split][name] = [(objects[i], name, values[attr][assign[attr][i]]) for i in groups[split]]
            candidates[name] = list(values[attr])
    return background, tasks, candidates


def synthetic_data(seed: int = 0, max_neighbors: int = 50, **kwargs) -> KGData:
    """Generate the benchmark and load it through the regular loaders (via a temp dir)."""
    import tempfile

    background, tasks, candidates = generate(seed=seed, **kwargs)
    with tempfile.TemporaryDirectory() as tmp:
        kg_store.write_dataset(tmp, background, tasks, candidates)
        return kg_store.load_dataset(tmp, max_neighbors=max_neighbors, seed=seed)


def write_synthetic(data_dir, seed: int = 0, **kwargs) -> Path:
    background, tasks, candidates = generate(seed=seed, **kwargs)
    return kg_store.write_dataset(data_dir, background, tasks, candidates)
