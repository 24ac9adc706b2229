import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from takand.attention import (
    EnhancedPair,
    MeanCouplingEnhancer,
    Neighbors,
    TaskRelationExtractor,
    TwoStageEnhancer,
    attend,
    attention_weights,
    encode_neighbor,
    gated_couple,
    self_loop_neighbors,
)

D = torch.float64


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=D)


def test_encoder_selects_relation_half():
    d = 3
    W = torch.cat([torch.eye(d), torch.zeros(d, d)], 1).double()
    r, n = rand(d, seed=1), rand(d, seed=2)
    out = encode_neighbor(r, n, W, torch.zeros(d, dtype=D), act=lambda x: x)
    assert torch.equal(out, r)


def test_encoder_zero_input():
    W = rand(4, 8)
    out = encode_neighbor(torch.zeros(4, dtype=D), torch.zeros(4, dtype=D), W, torch.zeros(4, dtype=D))
    assert torch.equal(out, torch.tanh(torch.zeros(4, dtype=D)))


def test_encoder_direct_evaluation():
    W, b, r, n = rand(4, 8, seed=3), rand(4, seed=4), rand(4, seed=5), rand(4, seed=6)
    Wn, bn, rn, nn_ = (x.numpy() for x in (W, b, r, n))
    expected = np.tanh(Wn @ np.concatenate([rn, nn_]) + bn)
    assert np.allclose(encode_neighbor(r, n, W, b).numpy(), expected, atol=1e-12)


def test_single_neighbor_returns_value():
    v = rand(1, 4, seed=7)
    out = attend(rand(4, seed=8), rand(1, 4, seed=9), v)
    assert torch.equal(out, v[0])


def test_identical_keys_give_mean():
    keys = rand(1, 3).expand(5, 3)
    values = rand(5, 3, seed=1)
    out = attend(rand(3, seed=2), keys, values)
    assert torch.allclose(out, values.mean(0), atol=1e-12)


def test_two_neighbor_brute_force():
    q, K, V = rand(3, seed=1), rand(2, 3, seed=2), rand(2, 3, seed=3)
    logits = [float(q @ K[0]), float(q @ K[1])]
    m = max(logits)
    w = [np.exp(x - m) for x in logits]
    w = [x / sum(w) for x in w]
    expected = w[0] * V[0].numpy() + w[1] * V[1].numpy()
    assert np.allclose(attend(q, K, V).numpy(), expected, atol=1e-12)


def test_masked_row_without_neighbors_rejected():
    with pytest.raises(ValueError):
        attention_weights(rand(1, 3), rand(1, 2, 3), torch.zeros(1, 2, dtype=torch.bool))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 50), st.integers(0, 10_000))
def test_weights_sum_to_one(m, seed):
    w = attention_weights(rand(4, seed=seed), rand(m, 4, seed=seed + 1))
    assert abs(float(w.sum()) - 1.0) < 1e-6
    assert bool((w >= 0).all())


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 20), st.integers(0, 10_000))
def test_permutation_invariance(m, seed):
    q, K, V = rand(4, seed=seed), rand(m, 4, seed=seed + 1), rand(m, 4, seed=seed + 2)
    p = torch.randperm(m, generator=torch.Generator().manual_seed(seed))
    assert torch.allclose(attend(q, K, V), attend(q, K[p], V[p]), atol=1e-6)


def test_gate_saturated_open():
    x, xn = rand(4, seed=1), rand(4, seed=2)
    out = gated_couple(x, xn, torch.zeros(4, 8, dtype=D), torch.full((4,), 1e3, dtype=D))
    assert torch.equal(out, x)


def test_gate_saturated_closed():
    x, xn = rand(4, seed=1), rand(4, seed=2)
    out = gated_couple(x, xn, torch.zeros(4, 8, dtype=D), torch.full((4,), -1e3, dtype=D))
    assert torch.equal(out, xn)


def test_gate_direct_evaluation():
    x, xn, W, b = rand(4, seed=1), rand(4, seed=2), rand(4, 8, seed=3), rand(4, seed=4)
    g = 1 / (1 + np.exp(-(W.numpy() @ np.concatenate([x.numpy(), xn.numpy()]) + b.numpy())))
    expected = g * x.numpy() + (1 - g) * xn.numpy()
    assert np.allclose(gated_couple(x, xn, W, b).numpy(), expected, atol=1e-12)


def _enhancer(seed=0):
    torch.manual_seed(seed)
    return TwoStageEnhancer(4).double()


def test_stage2_single_neighbor():
    enh = _enhancer()
    nb = Neighbors(rand(1, 1, 4, seed=1), rand(1, 1, 4, seed=2), torch.ones(1, 1, dtype=torch.bool))
    enc = rand(1, 1, 4, seed=3)
    out = enh.stage2(rand(1, 4, seed=4), nb, enc)
    assert torch.allclose(out, enh.v2(enc[:, 0]), atol=1e-15)


def test_stage2_identical_entities_uniform():
    enh = _enhancer()
    ents = rand(1, 1, 4, seed=1).expand(1, 3, 4)
    nb = Neighbors(rand(1, 3, 4, seed=2), ents, torch.ones(1, 3, dtype=torch.bool))
    enc = rand(1, 3, 4, seed=3)
    out = enh.stage2(rand(1, 4, seed=4), nb, enc)
    assert torch.allclose(out, enh.v2(enc).mean(1), atol=1e-12)


def _softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def _sigmoid(x):
    return 1 / (1 + np.exp(-x))


def straight_line_enhance(p, h, t, h_rel, h_ent, t_rel, t_ent):
    """Step-by-step numpy evaluation of the two-stage enhancer for one pair."""
    W, b = p["bilinear.weight"], p["bilinear.bias"]
    r = np.array([h @ W[k] @ t for k in range(len(h))]) + b
    Wf, bf = p["neighbor_encoder.weight"], p["neighbor_encoder.bias"]
    Wg, bg = p["gate.weight"], p["gate.bias"]

    def enc(rels, ents):
        return [np.tanh(Wf @ np.concatenate([ri, ni]) + bf) for ri, ni in zip(rels, ents)]

    def couple(x, xn):
        g = _sigmoid(Wg @ np.concatenate([x, xn]) + bg)
        return g * x + (1 - g) * xn

    def stage(query, keys, encs, Wq, Wk, Wv):
        q = Wq @ query
        w = _softmax(np.array([q @ (Wk @ k) for k in keys]))
        return sum(wi * (Wv @ e) for wi, e in zip(w, encs))

    he, te = enc(h_rel, h_ent), enc(t_rel, t_ent)
    h_r = couple(h, stage(r, h_rel, he, p["q1.weight"], p["k1.weight"], p["v1.weight"]))
    t_r = couple(t, stage(r, t_rel, te, p["q1.weight"], p["k1.weight"], p["v1.weight"]))
    h_tilde = couple(h_r, stage(t_r, h_ent, he, p["q2.weight"], p["k2.weight"], p["v2.weight"]))
    t_tilde = couple(t_r, stage(h_r, t_ent, te, p["q2.weight"], p["k2.weight"], p["v2.weight"]))
    return h_tilde, t_tilde


def test_enhance_matches_straight_line_script():
    # toy graph over 5 entities / 2 relations, d = 4
    edges = [(0, 0, 1), (0, 1, 2), (3, 0, 0), (1, 1, 4), (4, 0, 1)]
    ent = rand(5, 4, seed=10)
    rel = rand(2, 4, seed=11)

    def nbrs(e):
        rows = [(rel[r], ent[t]) for h, r, t in edges if h == e] + [(-rel[r], ent[h]) for h, r, t in edges if t == e]
        return torch.stack([x for x, _ in rows]), torch.stack([y for _, y in rows])

    enh = _enhancer(3)
    params = {k: v.detach().numpy() for k, v in enh.named_parameters()}
    for h_id, t_id in [(0, 1), (1, 4), (3, 2)]:
        hr, he = nbrs(h_id)
        tr, te = nbrs(t_id)
        # pad both sides to the same width to exercise masking
        m = max(len(hr), len(tr))

        def pad(x):
            return torch.cat([x, torch.zeros(m - len(x), 4, dtype=D)]) if len(x) < m else x

        h_nb = Neighbors(pad(hr)[None], pad(he)[None], (torch.arange(m) < len(hr))[None])
        t_nb = Neighbors(pad(tr)[None], pad(te)[None], (torch.arange(m) < len(tr))[None])
        out = enh(ent[h_id][None], ent[t_id][None], h_nb, t_nb)
        exp_h, exp_t = straight_line_enhance(params, ent[h_id].numpy(), ent[t_id].numpy(), hr.numpy(), he.numpy(), tr.numpy(), te.numpy())
        assert np.allclose(out.h_tilde[0].detach().numpy(), exp_h, atol=1e-6)
        assert np.allclose(out.t_tilde[0].detach().numpy(), exp_t, atol=1e-6)


def test_no_neighbor_fallback_is_finite_and_deterministic():
    enh = _enhancer()
    h, t = rand(2, 4, seed=1), rand(2, 4, seed=2)
    a = enh(h, t, self_loop_neighbors(h), self_loop_neighbors(t))
    b = enh(h, t, self_loop_neighbors(h), self_loop_neighbors(t))
    assert torch.isfinite(a.h_tilde).all() and torch.isfinite(a.t_tilde).all()
    assert torch.equal(a.h_tilde, b.h_tilde) and torch.equal(a.t_tilde, b.t_tilde)


def test_same_seed_same_output():
    h, t = rand(3, 4, seed=1), rand(3, 4, seed=2)
    nb = Neighbors(rand(3, 5, 4, seed=3), rand(3, 5, 4, seed=4), torch.ones(3, 5, dtype=torch.bool))
    a = _enhancer(5)(h, t, nb, nb)
    b = _enhancer(5)(h, t, nb, nb)
    assert torch.equal(a.h_tilde, b.h_tilde)


def test_neighbor_order_does_not_matter_for_enhancer():
    enh = _enhancer()
    h, t = rand(1, 4, seed=1), rand(1, 4, seed=2)
    rel, ent = rand(1, 6, 4, seed=3), rand(1, 6, 4, seed=4)
    mask = torch.ones(1, 6, dtype=torch.bool)
    p = torch.tensor([3, 0, 5, 1, 4, 2])
    a = enh(h, t, Neighbors(rel, ent, mask), Neighbors(rel, ent, mask))
    b = enh(h, t, Neighbors(rel[:, p], ent[:, p], mask), Neighbors(rel[:, p], ent[:, p], mask))
    assert torch.allclose(a.h_tilde, b.h_tilde, atol=1e-6) and torch.allclose(a.t_tilde, b.t_tilde, atol=1e-6)


def test_task_relation_single_pair_is_that_pair():
    torch.manual_seed(0)
    ex = TaskRelationExtractor(4).double()
    x = rand(1, 4)
    assert torch.allclose(ex(x), ex(x.expand(1, 4)))
    # the aggregate of one pair is the pair itself
    assert torch.equal(x.mean(-2), x[0])


def test_task_relation_duplicate_pairs_idempotent():
    torch.manual_seed(0)
    ex = TaskRelationExtractor(4).double()
    x = rand(1, 4)
    assert torch.allclose(ex(x), ex(torch.cat([x, x])), atol=1e-15)


def test_task_relation_direct_evaluation():
    torch.manual_seed(1)
    ex = TaskRelationExtractor(4).double()
    x = rand(3, 4, seed=9)
    p = {k: v.detach().numpy() for k, v in ex.named_parameters()}

    def lin(name, v):
        return p[name + ".weight"] @ v + p[name + ".bias"]

    def silu(v):
        return v / (1 + np.exp(-v))

    agg = x.numpy().mean(0)
    a = lin("split_a", agg)
    a = lin("ff_a.2", silu(lin("ff_a.0", a)))
    b = lin("split_b", agg)
    b = lin("ff_b.2", silu(lin("ff_b.0", b)))
    expected = np.tanh(lin("compress", np.concatenate([a, b])))
    assert np.allclose(ex(x).detach().numpy(), expected, atol=1e-12)


def test_task_relation_order_invariant():
    torch.manual_seed(0)
    ex = TaskRelationExtractor(4).double()
    x = rand(5, 4)
    assert torch.allclose(ex(x), ex(x.flip(0)), atol=1e-12)


def test_task_relation_empty_support():
    with pytest.raises(ValueError):
        TaskRelationExtractor(4)(torch.zeros(0, 4))


def test_mean_coupling_enhancer_uses_masked_mean():
    torch.manual_seed(0)
    enh = MeanCouplingEnhancer(4).double()
    h = rand(1, 4)
    ent = rand(1, 3, 4, seed=1)
    mask = torch.tensor([[True, True, False]])
    nb = Neighbors(torch.zeros(1, 3, 4, dtype=D), ent, mask)
    out = enh(h, h, nb, nb)
    expected = gated_couple(h, ent[:, :2].mean(1), enh.gate.weight, enh.gate.bias)
    assert torch.allclose(out.h_tilde, expected, atol=1e-12)
    assert isinstance(out, EnhancedPair)
