import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from jointcap.errors import ConfigError, ContractError
from jointcap.kg import ComplexEmbeddingTable
from jointcap.mapping import (
    AttentionMapper,
    ClassifierHead,
    MappingConfig,
    MappingNetwork,
    attend_multi,
    build_proposal_set,
    cluster_regions,
    diversity_penalty,
    infer_concept_distribution,
    knowledge_vector,
    labels_from_caption,
    make_mapping_networks,
    mapping_loss,
    mean_average_precision,
    multilabel_scores,
    pair_features,
    predict_multilabel,
    train_mapping_networks,
    LabelSet,
)
from jointcap.numeric import finite_diff_check, init_module, zero_module

from .oracles import kl, kmeans_exhaustive, simplex_projection_bisection, softmax

LEX = {"object": ["man", "horse", "car"], "relationship": ["riding", "near"], "attribute": ["red", "small"]}


def test_cluster_one_point_per_cluster(rng):
    X = rng.normal(size=(5, 3))
    centers, history = cluster_regions(X, 5, return_history=True)
    assert sorted(map(tuple, centers)) == sorted(map(tuple, X))
    assert history[-1] == 0.0


def test_cluster_1d_example():
    centers = cluster_regions(np.array([[0.0], [1.0], [10.0], [11.0]]), 2)
    assert sorted(centers[:, 0]) == [0.5, 10.5]


@pytest.mark.parametrize("seed", range(5))
def test_cluster_matches_exhaustive_optimum(seed):
    rng = np.random.default_rng(seed)
    X = np.concatenate([rng.normal(c, 0.3, size=(2, 2)) for c in (0.0, 4.0, 8.0)])
    best, _ = kmeans_exhaustive(X, 3)
    _, history = cluster_regions(X, 3, seed=seed, return_history=True)
    assert history[-1] == pytest.approx(best, rel=1e-9)


def test_cluster_objective_never_increases(rng):
    X = rng.normal(size=(40, 4))
    _, history = cluster_regions(X, 6, n_init=1, return_history=True)
    assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))


@pytest.mark.parametrize("k", [5, 7, 10])
def test_cluster_accepts_configured_range(rng, k):
    assert cluster_regions(rng.normal(size=(20, 3)), k).shape == (k, 3)


def test_cluster_rejects_too_many_clusters(rng):
    with pytest.raises(ConfigError):
        cluster_regions(rng.normal(size=(3, 2)), 4)


def test_pair_features_counts(rng):
    assert pair_features(rng.normal(size=(2, 3))).shape == (1, 3)
    assert pair_features(rng.normal(size=(4, 3)), pair_limit=6).shape == (6, 3)
    assert pair_features(rng.normal(size=(10, 3)), pair_limit=6).shape == (6, 3)


def test_pair_features_enumerate_all_pairs(rng):
    X = rng.normal(size=(4, 3))
    expected = sorted(tuple((X[i] + X[j]) / 2) for i, j in itertools.combinations(range(4), 2))
    assert sorted(map(tuple, pair_features(X, pair_limit=6))) == pytest.approx(expected)


def test_pair_feature_of_identical_regions():
    r = np.array([[1.5, -2.0], [1.5, -2.0]])
    np.testing.assert_array_equal(pair_features(r)[0], r[0])


def test_pair_features_need_two_regions():
    with pytest.raises(ContractError):
        pair_features(np.ones((1, 3)))


def _mapper(in_dim=4, hidden=5, heads=3, seed=0):
    m = AttentionMapper(in_dim, hidden, heads)
    init_module(m, np.random.default_rng(seed))
    return m


def test_single_proposal_attention(rng):
    V = rng.normal(size=(1, 4))
    Z = attend_multi(V, _mapper()).detach().numpy()
    np.testing.assert_array_equal(Z, np.repeat(V, 3, axis=0))


def test_saturated_logit_selects_one_proposal(rng):
    m = _mapper(in_dim=3, hidden=3, heads=1)
    V = torch.tensor(np.eye(3) * 10.0)
    with torch.no_grad():
        m.W1.weight.copy_(torch.eye(3))
        m.W1.bias.zero_()
        m.W2.weight.copy_(torch.tensor([[5.0, 0.0, 0.0]]))
    # tanh(10) * 5 is about 5 for the first proposal and 0 for the others
    _, A = m(V)
    np.testing.assert_allclose(A.detach().numpy()[0], [1.0, 0.0, 0.0], atol=1e-12)


def test_default_heads():
    assert AttentionMapper(4).heads == 3 and MappingConfig().heads == 3


@given(st.integers(1, 12), st.integers(0, 10_000))
def test_attention_rows_on_simplex(n, seed):
    rng = np.random.default_rng(seed)
    m = _mapper(seed=seed)
    with torch.no_grad():
        for p in m.parameters():
            p.mul_(rng.uniform(0.1, 5.0))
    _, A = m(torch.tensor(rng.normal(size=(n, 4))))
    A = A.detach().numpy()
    assert (A >= 0).all() and np.allclose(A.sum(1), 1.0, atol=1e-12)


def test_classifier_zero_gives_half():
    head = ClassifierHead(4, 3)
    zero_module(head)
    np.testing.assert_array_equal(predict_multilabel(torch.ones(2, 4), head).detach().numpy(), [0.5] * 3)


def test_classifier_saturation_and_cancellation():
    head = ClassifierHead(1, 1)
    with torch.no_grad():
        head.f.weight.fill_(1.0)
        head.f.bias.zero_()
    assert predict_multilabel(torch.tensor([[10.0]]), head).item() > 0.9999
    assert predict_multilabel(torch.tensor([[3.0], [-3.0]]), head).item() == 0.5


def test_diversity_identical_rows_is_zero():
    z = torch.tensor([[0.3, -1.0, 2.0]] * 3)
    assert diversity_penalty(z).item() == pytest.approx(0.0, abs=1e-15)


def test_diversity_two_rows_matches_hand_kl():
    p, q = [0.5, 0.5], [0.9, 0.1]
    Z = torch.tensor(np.log([p, q]))
    assert kl(p, q) == pytest.approx(0.5 * math.log(25 / 9))
    assert diversity_penalty(Z).item() == pytest.approx(-(kl(p, q) + kl(q, p)), rel=1e-12)


def test_diversity_single_row_warns_and_is_zero(caplog):
    assert diversity_penalty(torch.ones(1, 3)).item() == 0.0
    assert "at least two" in caplog.text


@given(st.integers(2, 5), st.integers(1, 6), st.integers(0, 10_000))
def test_diversity_nonpositive_and_zero_iff_identical(k, d, seed):
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(k, d)) * 3
    oracle = -sum(kl(softmax(Z[i]), softmax(Z[j])) for i in range(k) for j in range(k) if i != j)
    got = diversity_penalty(torch.tensor(Z)).item()
    assert got <= 1e-15 and got == pytest.approx(oracle, rel=1e-9, abs=1e-12)
    if d > 1:
        assert got < 0


def test_bce_examples():
    eps = 1e-9
    assert mapping_loss(torch.tensor([eps, 1 - eps]), [0.0, 1.0]).item() < 1e-7
    assert mapping_loss(torch.full((4,), 0.5), [1.0, 0.0, 1.0, 1.0]).item() == pytest.approx(math.log(2))
    got = mapping_loss(torch.tensor([0.9, 0.2]), [1.0, 0.0]).item()
    assert got == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2)


def test_bce_rejects_soft_labels():
    with pytest.raises(ContractError):
        mapping_loss(torch.tensor([0.5]), [0.3])


def test_mapping_loss_gradient(rng):
    net = make_mapping_networks(4, {"object": 3, "relationship": 2, "attribute": 2}, hidden=5, rng=rng)["object"]
    V = torch.tensor(rng.normal(size=(4, 4)))
    y = torch.tensor([1.0, 0.0, 1.0])

    def f():
        Z, _ = net.mapper(V)
        return mapping_loss(predict_multilabel(Z, net.head), y, Z)

    assert finite_diff_check(f, dict(net.named_parameters())) < 1e-5


def test_labels_from_caption():
    ls = labels_from_caption("a man riding a horse".split(), LEX)
    assert [LEX["object"][i] for i in np.flatnonzero(ls.objects)] == ["man", "horse"]
    assert [LEX["relationship"][i] for i in np.flatnonzero(ls.relations)] == ["riding"]
    assert not ls.attributes.any()


def test_labels_empty_and_repeated():
    empty = labels_from_caption([], LEX)
    assert not (empty.objects.any() or empty.relations.any() or empty.attributes.any())
    rep = labels_from_caption("red red car".split(), LEX)
    np.testing.assert_array_equal(rep.attributes, [1.0, 0.0])


def test_infer_distribution_examples():
    head = ClassifierHead(1, 3)
    zero_module(head)
    np.testing.assert_allclose(infer_concept_distribution([[2.0]], head), [[1 / 3] * 3], atol=1e-15)
    with torch.no_grad():
        head.f.bias.copy_(torch.tensor([5.0, 0.0, 0.0]))
    np.testing.assert_allclose(infer_concept_distribution([[0.0]], head), [[1, 0, 0]], atol=1e-12)
    with torch.no_grad():
        head.f.bias.copy_(torch.tensor([0.5, 0.3, -9.0]))
    np.testing.assert_allclose(infer_concept_distribution([[0.0]], head), [[0.6, 0.4, 0.0]], atol=1e-12)


@given(st.integers(1, 8), st.integers(0, 10_000))
def test_inferred_distributions_on_simplex_and_match_oracle(c, seed):
    rng = np.random.default_rng(seed)
    head = ClassifierHead(3, c)
    init_module(head, rng)
    V = rng.normal(size=(4, 3)) * 4
    P = infer_concept_distribution(V, head)
    assert (P >= 0).all() and np.allclose(P.sum(1), 1, atol=1e-12)
    logits = V @ head.f.weight.detach().numpy().T
    for p, z in zip(P, logits):
        np.testing.assert_allclose(p, simplex_projection_bisection(z), atol=1e-9)


def test_knowledge_vector_examples(rng):
    table = ComplexEmbeddingTable(np.array([[2.0], [4.0]]), np.zeros((2, 1)))
    np.testing.assert_allclose(knowledge_vector([0.25, 0.75], table, [0, 1]), [3.5, 0.0])
    big = ComplexEmbeddingTable(rng.normal(size=(5, 3)), rng.normal(size=(5, 3)))
    k = knowledge_vector([0, 0, 1.0], big, [1, 2, 4])
    np.testing.assert_array_equal(k, np.concatenate([big.real[4], big.imag[4]]))
    same = ComplexEmbeddingTable(np.tile(big.real[:1], (3, 1)), np.tile(big.imag[:1], (3, 1)))
    np.testing.assert_allclose(knowledge_vector([1 / 3] * 3, same, [0, 1, 2]),
                               np.concatenate([big.real[0], big.imag[0]]), atol=1e-15)


@given(st.integers(0, 10_000))
def test_knowledge_vector_norm_bound(seed):
    rng = np.random.default_rng(seed)
    table = ComplexEmbeddingTable(rng.normal(size=(6, 4)), rng.normal(size=(6, 4)))
    p = simplex_projection_bisection(rng.normal(size=6) * 3)
    k = knowledge_vector(p, table, np.arange(6))
    cols = np.linalg.norm(np.concatenate([table.real, table.imag], axis=1), axis=1)
    assert np.linalg.norm(k) <= cols.max() + 1e-12


def _nets_and_table(rng, in_dim=4):
    sizes = {"object": 3, "relationship": 2, "attribute": 2}
    nets = make_mapping_networks(in_dim, sizes, hidden=6, rng=rng)
    table = ComplexEmbeddingTable(rng.normal(size=(7, 2)), rng.normal(size=(7, 2)))
    idx = {"object": np.arange(3), "relationship": np.arange(3, 5), "attribute": np.arange(5, 7)}
    return nets, table, idx


def test_proposal_set_reconstructs_knowledge(rng):
    nets, table, idx = _nets_and_table(rng)
    ps = build_proposal_set("s", rng.normal(size=(12, 4)), nets, table, idx, seed=3)
    assert 5 <= ps.num_objects <= 10 and 5 <= ps.num_relations <= 10
    for w, k, role in ((ps.obj_weights, ps.obj_knowledge, "object"), (ps.rel_weights, ps.rel_knowledge, "relationship"),
                       (ps.att_weights, ps.att_knowledge, "attribute")):
        rows = np.concatenate([w @ table.real[idx[role]], w @ table.imag[idx[role]]], axis=1)
        np.testing.assert_allclose(rows, k, atol=1e-12)


def test_proposal_set_single_region(rng, caplog):
    nets, table, idx = _nets_and_table(rng)
    ps = build_proposal_set("s", rng.normal(size=(1, 4)), nets, table, idx)
    assert ps.num_objects == 1 and ps.num_relations == 0 and not ps.has_relations


def test_proposal_set_json_round_trip(rng):
    nets, table, idx = _nets_and_table(rng)
    ps = build_proposal_set("s", rng.normal(size=(9, 4)), nets, table, idx, seed=1)
    back = type(ps).from_json(ps.to_json())
    for name, value in ps.__dict__.items():
        if isinstance(value, np.ndarray):
            np.testing.assert_array_equal(getattr(back, name), value)
        else:
            assert getattr(back, name) == value


def test_average_precision_known_values():
    labels = np.array([[1, 0], [0, 1], [1, 1]])
    assert mean_average_precision(labels.astype(float), labels) == 1.0
    # class 0 ranks a negative first: precision at hits 1/2 and 2/3
    scores = np.array([[0.5, 0.2], [0.9, 0.8], [0.3, 0.9]])
    assert mean_average_precision(scores, labels) == pytest.approx(((1 / 2 + 2 / 3) / 2 + 1.0) / 2)


def test_separable_multilabel_training_reaches_high_map():
    rng = np.random.default_rng(0)
    C, d = 6, 8
    protos = rng.normal(size=(C, d)) * 2
    region_sets, labels = [], []
    for _ in range(30):
        present = rng.choice(C, size=int(rng.integers(1, 4)), replace=False)
        regions = np.concatenate([protos[c] + 0.05 * rng.normal(size=(2, d)) for c in present])
        y = np.zeros(C)
        y[present] = 1
        region_sets.append(regions)
        labels.append(LabelSet(y, np.zeros(1), np.zeros(1)))
    net = MappingNetwork("object", _mapper(d, 16, 3), ClassifierHead(d, C))
    init_module(net.head, rng)
    cfg = MappingConfig(epochs=200, k_min=1, k_max=2, learning_rate=0.02)
    train_mapping_networks(region_sets, labels, {"object": net}, cfg)
    scores = multilabel_scores(region_sets, net, 2)
    assert mean_average_precision(scores, np.array([lab.objects for lab in labels])) >= 0.95
