import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from takand.embedding import (
    BilinearRelation,
    EmbeddingTable,
    bilinear_relation,
    export_embeddings,
    import_pretrained,
    load_embeddings,
    pretrain_transe,
    transe_distance,
)
from takand.kg_store import TripleSet

from conftest import write_lines


def _triple_set(edges):
    ts = TripleSet([], {}, {})
    for h, r, t in edges:
        ts.triples.append((ts.entity_id(h, True), ts.relation_id(r, True), ts.entity_id(t, True)))
    return ts


def test_import_width_matches(tmp_path):
    ent = write_lines(tmp_path / "e.txt", ["0.1 0.2 0.3 0.4"] * 3)
    rel = write_lines(tmp_path / "r.txt", ["1 0 0 0"])
    table = import_pretrained(ent, rel, 3, 1, dim=4)
    assert table.dim == 4 and table.num_entities == 3


def test_import_width_mismatch(tmp_path):
    ent = write_lines(tmp_path / "e.txt", ["0.1 0.2 0.3"] * 3)
    rel = write_lines(tmp_path / "r.txt", ["1 0 0"])
    with pytest.raises(ValueError, match="d=4"):
        import_pretrained(ent, rel, 3, 1, dim=4)


def test_import_pads_missing_rows(tmp_path):
    ent = write_lines(tmp_path / "e.txt", ["1 2"] * 2)
    rel = write_lines(tmp_path / "r.txt", ["1 0"])
    table = import_pretrained(ent, rel, 5, 1)
    assert table.entity.shape == (5, 2)
    assert torch.equal(table.entity[:2], torch.tensor([[1.0, 2.0]] * 2))


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_export_import_round_trip(tmp_path, dtype):
    table = EmbeddingTable.random(7, 3, 5, np.random.default_rng(0), dtype=dtype)
    export_embeddings(table, tmp_path / "emb", "abc")
    back = load_embeddings(tmp_path / "emb", "abc")
    assert torch.equal(back.entity, table.entity) and torch.equal(back.relation, table.relation)
    assert back.entity.dtype == dtype


def test_load_rejects_other_vocab(tmp_path):
    table = EmbeddingTable.random(2, 1, 3, np.random.default_rng(0))
    export_embeddings(table, tmp_path / "emb", "abc")
    with pytest.raises(ValueError, match="hash"):
        load_embeddings(tmp_path / "emb", "xyz")


def test_distance_identity():
    h, r = torch.randn(5), torch.randn(5)
    assert transe_distance(h, r, h + r).item() == pytest.approx(0.0, abs=1e-6)


def test_distance_worked_value():
    d = transe_distance(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]), torch.tensor([0.0, 0.0]))
    assert d.item() == pytest.approx(1.41421, abs=1e-5)


def test_distance_dimension_mismatch():
    with pytest.raises(ValueError):
        transe_distance(torch.zeros(2), torch.zeros(3), torch.zeros(2))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_distance_permutation_invariant(d, seed):
    g = torch.Generator().manual_seed(seed)
    h, r, t = (torch.randn(d, generator=g, dtype=torch.float64) for _ in range(3))
    p = torch.randperm(d, generator=g)
    assert torch.allclose(transe_distance(h, r, t), transe_distance(h[p], r[p], t[p]), atol=1e-12)


def test_single_triple_pretraining():
    ts = _triple_set([("a", "r", "b")])
    table = pretrain_transe(ts, 4, epochs=200, lr=0.05, rng=np.random.default_rng(0))
    a, r, b = table.entity[0], table.relation[0], table.entity[1]
    assert transe_distance(a, r, b) < transe_distance(a, r, a)


def test_chain_distance_decreases():
    ts = _triple_set([(f"n{i}", "next", f"n{i + 1}") for i in range(10)])
    table = pretrain_transe(ts, 8, epochs=5, lr=0.01, rng=np.random.default_rng(3))
    dist = [row["pos_distance"] for row in table.history]
    assert all(b < a for a, b in zip(dist, dist[1:]))


def reference_transe(triples, n_ent, n_rel, dim, epochs, margin, lr, seed, batch_size):
    """Plain numpy TransE with hand-written gradients, drawing from the rng in the same order."""
    rng = np.random.default_rng(seed)
    bound = 6.0 / math.sqrt(dim)
    E = rng.uniform(-bound, bound, size=(n_ent, dim))
    R = rng.uniform(-bound, bound, size=(n_rel, dim))
    R /= np.linalg.norm(R, axis=1, keepdims=True)
    losses = []
    for _ in range(epochs):
        E /= np.maximum(np.linalg.norm(E, axis=1, keepdims=True), 1e-12)
        order = rng.permutation(len(triples))
        total = 0.0
        for start in range(0, len(order), batch_size):
            pos = triples[order[start : start + batch_size]]
            neg = pos.copy()
            side = np.where(rng.random(len(pos)) < 0.5, 0, 2)
            draw = rng.integers(0, n_ent - 1, size=len(pos))
            orig = neg[np.arange(len(neg)), side]
            neg[np.arange(len(neg)), side] = draw + (draw >= orig)
            vp = E[pos[:, 0]] + R[pos[:, 1]] - E[pos[:, 2]]
            vn = E[neg[:, 0]] + R[neg[:, 1]] - E[neg[:, 2]]
            dp, dn = np.linalg.norm(vp, axis=1), np.linalg.norm(vn, axis=1)
            viol = margin + dp - dn
            active = (viol > 0).astype(float)[:, None] / len(pos)
            total += np.maximum(viol, 0).sum()
            gp = active * vp / dp[:, None]
            gn = -active * vn / dn[:, None]
            gE = np.zeros_like(E)
            gR = np.zeros_like(R)
            for trip, g in ((pos, gp), (neg, gn)):
                np.add.at(gE, trip[:, 0], g)
                np.add.at(gE, trip[:, 2], -g)
                np.add.at(gR, trip[:, 1], g)
            E -= lr * gE
            R -= lr * gR
        losses.append(total / len(triples))
    return losses


def test_matches_reference_transe():
    edges = [("a", "r", "b"), ("b", "r", "c"), ("c", "s", "a"), ("a", "s", "d"), ("d", "r", "a"), ("b", "s", "d")]
    ts = _triple_set(edges)
    kw = dict(epochs=30, margin=1.0, lr=0.05, batch_size=2)
    table = pretrain_transe(ts, 2, rng=np.random.default_rng(11), dtype=torch.float64, **kw)
    ref = reference_transe(ts.as_array(), ts.num_entities, ts.num_relations, 2, seed=11, **kw)
    ours = table.history[-1]["loss"]
    assert ours == pytest.approx(ref[-1], rel=0.10)


def test_bilinear_zero_weight():
    W = torch.zeros(3, 3, 3)
    out = bilinear_relation(torch.randn(3), torch.randn(3), W, torch.zeros(3))
    assert torch.equal(out, torch.zeros(3))


def test_bilinear_identity_slices():
    W = torch.eye(2).expand(2, 2, 2)
    out = bilinear_relation(torch.tensor([1.0, 2.0]), torch.tensor([3.0, 4.0]), W)
    assert out.tolist() == [11.0, 11.0]


def test_bilinear_linear_in_head():
    torch.manual_seed(0)
    W = torch.randn(4, 4, 4, dtype=torch.float64)
    h, t = torch.randn(4, dtype=torch.float64), torch.randn(4, dtype=torch.float64)
    assert torch.allclose(bilinear_relation(2 * h, t, W), 2 * bilinear_relation(h, t, W))


def test_low_rank_module_matches_full_weight():
    torch.manual_seed(0)
    mod = BilinearRelation(50).double()
    assert mod.rank == 8
    h, t = torch.randn(3, 50, dtype=torch.float64), torch.randn(3, 50, dtype=torch.float64)
    assert torch.allclose(mod(h, t), bilinear_relation(h, t, mod.full_weight(), mod.bias))


def test_small_dim_uses_full_tensor():
    assert BilinearRelation(4).rank == 0
