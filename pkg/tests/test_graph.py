import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from jointcap.errors import DimensionError
from jointcap.graph import (
    Criterion,
    SemanticMapper,
    Triplet,
    criterion_score,
    enumerate_candidates,
    init_cache_entry,
    score_candidates,
    select_triplets,
    semantic_map,
    triplet_rows,
    update_cache_entry,
)
from jointcap.kg import complex_trilinear_score
from jointcap.mapping import CandidateProposalSet
from jointcap.numeric import finite_diff_check, init_module, zero_module

from .oracles import greedy_select


def test_zero_mapper_returns_bias():
    m = SemanticMapper(2, 2, 3, 4)
    zero_module(m)
    with torch.no_grad():
        m.layer2.bias.copy_(torch.tensor([1.0, -2.0, 0.5]))
    out = semantic_map(torch.ones(2), torch.ones(2), m)
    np.testing.assert_array_equal(out.detach().numpy(), [1.0, -2.0, 0.5])


def test_one_dimensional_mapper():
    m = SemanticMapper(1, 1, 1, 1)
    with torch.no_grad():
        m.layer1.weight.copy_(torch.tensor([[1.0, 1.0]]))
        m.layer1.bias.zero_()
        m.layer2.weight.fill_(2.0)
        m.layer2.bias.zero_()
    out = m(torch.tensor([0.3]), torch.tensor([0.2])).item()
    assert out == pytest.approx(2 * math.tanh(0.5), abs=1e-15)


def test_mapper_rejects_wrong_dims():
    with pytest.raises(DimensionError):
        SemanticMapper(3, 2, 4, 4)(torch.ones(2), torch.ones(2))


def test_mapper_gradient(rng):
    m = SemanticMapper(3, 2, 4, 5)
    init_module(m, rng)
    v, k = torch.tensor(rng.normal(size=(2, 3))), torch.tensor(rng.normal(size=(2, 2)))
    w = torch.tensor(rng.normal(size=(2, 4)))
    assert finite_diff_check(lambda: (w * m(v, k)).sum(), dict(m.named_parameters())) < 1e-6


def test_criterion_examples():
    assert criterion_score(torch.ones(3), torch.ones(3), torch.ones(3), torch.zeros(4, 3)).item() == 0.0
    W = torch.tensor([[1.0], [1.0]])  # W s = s (1 + i)
    one = torch.ones(1)
    assert criterion_score(one, one, one, W).item() == pytest.approx(2.0, abs=1e-15)


def test_criterion_matches_complex_path(rng):
    for _ in range(1000):
        Ls, L = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        W = rng.normal(size=(2 * L, Ls))
        s = rng.normal(size=(3, Ls))
        c = [W[:L] @ x + 1j * (W[L:] @ x) for x in s]
        got = criterion_score(*(torch.tensor(x) for x in s), torch.tensor(W)).item()
        assert abs(got - complex_trilinear_score(*c)) < 1e-10


def test_criterion_gradient(rng):
    s = {n: torch.tensor(rng.normal(size=4), requires_grad=True) for n in ("h", "r", "t")}
    crit = Criterion(4, 3)
    init_module(crit, rng)
    params = {**s, "W": crit.W}
    assert finite_diff_check(lambda: crit(s["h"], s["r"], s["t"]), params) < 1e-6


@pytest.mark.parametrize("n, f, count", [(2, 1, 6), (1, 1, 1), (3, 2, 2 * 3 * (2 + 3))])
def test_candidate_counts(n, f, count):
    assert len(enumerate_candidates(n, f)) == count


def test_candidate_order_is_head_major():
    keys = [c.key() for c in enumerate_candidates(3, 2)]
    assert keys == sorted(keys)


def _t(h, r, t, score, role="object"):
    return Triplet(h, r, t, role, score)


def test_selection_threshold():
    assert select_triplets([_t(0, 0, 1, -1.5)]).size == 0
    assert select_triplets([_t(0, 0, 1, -1.0)]).size == 1


def test_selection_hand_trace():
    A, B, C = 0, 1, 2
    cands = [_t(A, 0, B, 2.0), _t(A, 1, B, 1.5), _t(A, 0, C, 0.5)]
    got = [(t.head, t.relation, t.tail) for t in select_triplets(cands).triplets]
    assert got == [(A, 0, B), (A, 0, C)]


def test_selection_empty():
    g = select_triplets([])
    assert g.size == 0


def test_selection_caps_size():
    cands = [_t(0, 0, t, 1.0, "attribute") for t in range(10)]
    assert select_triplets(cands, max_size=4).size == 4


def _random_candidates(seed, n, f):
    rng = np.random.default_rng(seed)
    cands = enumerate_candidates(n, f)
    # coarse scores make ties common
    scores = np.round(rng.normal(0.5, 1.5, size=len(cands)), 1)
    return [c.with_score(s) for c, s in zip(cands, scores)]


def _overlap(a, b):
    return len(a.entity_vertices() & b.entity_vertices())


@given(st.integers(0, 10**6), st.integers(1, 4), st.integers(1, 3), st.integers(1, 8))
def test_selection_invariants_and_permutation(seed, n, f, gmax):
    cands = _random_candidates(seed, n, f)
    g = select_triplets(cands, gmax)
    assert g.size <= gmax
    assert all(t.score >= -1 for t in g.triplets)
    assert all(_overlap(a, b) <= 1 for i, a in enumerate(g.triplets) for b in g.triplets[i + 1:])
    perm = np.random.default_rng(seed + 1).permutation(len(cands))
    assert select_triplets([cands[i] for i in perm], gmax).triplets == g.triplets
    oracle = greedy_select([(c.score, c.key(), c.entity_vertices()) for c in cands], gmax)
    assert [t.key() for t in g.triplets] == oracle


@given(st.integers(0, 10**6), st.integers(1, 4), st.integers(1, 3), st.integers(1, 6))
def test_suppression_monotonicity(seed, n, f, gmax):
    cands = _random_candidates(seed, n, f)
    base = select_triplets(cands, gmax).triplets
    low = min([t.score for t in base], default=0.0) - 0.25
    extra = Triplet(n, 0, n + 1, "object", low)
    got = select_triplets(cands + [extra], gmax).triplets
    free = len(base) < gmax and all(_overlap(extra, t) <= 1 for t in base) and low >= -1
    assert got == (base + [extra] if free else base)


def _proposals(rng, n=3, f=2, dv=4, dk=6):
    w = lambda m, c: np.full((m, c), 1.0 / c)  # noqa: E731
    return CandidateProposalSet(
        "s", rng.normal(size=(n, dv)), rng.normal(size=(f, dv)), rng.normal(size=(n, dv)),
        rng.normal(size=(n, dk)), rng.normal(size=(f, dk)), rng.normal(size=(n, dk)),
        w(n, 2), w(f, 2), w(n, 2),
    )


def test_cache_initialised_from_knowledge(rng):
    ps = _proposals(rng)
    K = ps.knowledge()
    np.testing.assert_array_equal(init_cache_entry(ps, 8)[:, :6], K)
    np.testing.assert_array_equal(init_cache_entry(ps, 8)[:, 6:], 0.0)
    np.testing.assert_array_equal(init_cache_entry(ps, 4), K[:, :4])


def test_cache_update_is_pure(rng):
    ps = _proposals(rng)
    m = SemanticMapper(4, 6, 5, 7)
    init_module(m, rng)
    a, b = update_cache_entry(ps, m), update_cache_entry(ps, m)
    assert np.array_equal(a, b)


def test_scores_read_stacked_rows(rng):
    ps = _proposals(rng)
    feats = rng.normal(size=(2 * ps.num_objects + ps.num_relations, 5))
    W = rng.normal(size=(4, 5))
    scored = score_candidates(feats, ps.num_objects, ps.num_relations, W)
    h, r, t = triplet_rows(scored, ps.num_objects, ps.num_relations)
    for c, i, j, k in zip(scored, h, r, t):
        direct = criterion_score(*(torch.tensor(feats[x]) for x in (i, j, k)), torch.tensor(W)).item()
        assert c.score == pytest.approx(direct, rel=1e-12)
    att = [c for c in scored if c.tail_role == "attribute"][0]
    assert t[scored.index(att)] == ps.num_objects + ps.num_relations + att.tail
