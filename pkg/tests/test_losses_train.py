import math

import numpy as np
import pytest
import torch

from jointcap import checkpoint
from jointcap.errors import ConfigError, LoadError
from jointcap.graph import init_cache_entry
from jointcap.losses import semantic_loss, total_loss
from jointcap.numeric import backward, finite_diff_check
from jointcap.train import (
    REPORT_COLUMNS,
    JointTrainer,
    TrainConfig,
    beta_schedule,
    convergence_check,
    write_reports,
)

from . import toys

# ---------------------------------------------------------------------------
# semantic and total loss
# ---------------------------------------------------------------------------


def _one_triplet(score_scale=0.0):
    s = torch.ones(1, 2)
    W = torch.full((2, 2), score_scale)
    return s, W


def test_single_triplet_value():
    s, W = _one_triplet()
    got = semantic_loss(torch.tensor([[1.0]]), s, s, s, W, gamma=0.3, lam=0.01).item()
    assert got == pytest.approx(0.7 * math.log(2), abs=1e-15)


def test_alpha_at_threshold_leaves_only_penalty(rng):
    W = torch.tensor(rng.normal(size=(4, 3)))
    s = [torch.tensor(rng.normal(size=(3, 3))) for _ in range(3)]
    got = semantic_loss(torch.full((5, 3), 0.3), *s, W, gamma=0.3, lam=0.01).item()
    assert got == pytest.approx(0.01 * (W ** 2).sum().item(), abs=1e-14)


def test_empty_graph_leaves_only_penalty(rng):
    W = torch.tensor(rng.normal(size=(4, 3)))
    empty = torch.zeros(0, 3)
    got = semantic_loss(torch.zeros(4, 0), empty, empty, empty, W, lam=0.01).item()
    assert got == pytest.approx(0.01 * (W ** 2).sum().item(), abs=1e-14)


def test_alphas_are_constants():
    s, W = _one_triplet(0.5)
    alphas = torch.tensor([[0.9]], requires_grad=True)
    semantic_loss(alphas, s, s, s, W.requires_grad_(True)).backward()
    assert alphas.grad is None


def test_score_floor_stops_gradient_below_it():
    s = torch.ones(1, 1)
    W = torch.tensor([[-3.0], [0.0]], requires_grad=True)  # score = (-3)^3 = -27
    alphas = torch.tensor([[0.0]])
    floored = semantic_loss(alphas, s, s, s, W, lam=0.0, score_floor=-5.0)
    assert floored.item() == pytest.approx(-0.3 * math.log1p(math.exp(5.0)), abs=1e-12)
    assert backward(floored, {"W": W})["W"].tolist() == [[0.0], [0.0]]
    raw = semantic_loss(alphas, s, s, s, W, lam=0.0)
    assert raw.item() == pytest.approx(-0.3 * math.log1p(math.exp(27.0)), abs=1e-12)


def test_total_loss_examples():
    assert total_loss(2.0, 3.0, 0.1) == pytest.approx(2.3, abs=1e-15)
    assert total_loss(2.0, 3.0, 0.0) == 2.0


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.lam, cfg.gamma, cfg.beta_after_warmup, cfg.warmup_epochs, cfg.patience) == (0.01, 0.3, 0.1, 5, 10)


@pytest.mark.parametrize("bad", [{"lam": -0.1}, {"gamma": 1.5}, {"patience": 0}, {"k_min": 4, "k_max": 3}])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad).validate()


@pytest.mark.parametrize("epoch, warmup, beta", [(0, 5, 0.0), (4, 5, 0.0), (5, 5, 0.1), (50, 5, 0.1), (0, 0, 0.1)])
def test_beta_schedule(epoch, warmup, beta):
    assert beta_schedule(epoch, TrainConfig(warmup_epochs=warmup)) == beta


@pytest.mark.parametrize(
    "history, patience, expected",
    [
        ([1.0, 2.0, 3.0, 4.0], 2, False),
        ([0.5], 1, False),
        ([0, 1, 2, 3] + [2.0] * 10, 10, True),
        ([0, 1, 2, 3] + [2.0] * 9, 10, False),
    ],
)
def test_convergence_check(history, patience, expected):
    assert convergence_check(history, patience) is expected


# ---------------------------------------------------------------------------
# gradient properties on a toy batch
# ---------------------------------------------------------------------------


def _batch(tr):
    scenes = tr.train_scenes
    graphs = tr.select_graphs()
    return scenes, [graphs[s.scene_id] for s in scenes], [s.captions[0] for s in scenes]


def test_total_loss_gradient_is_linear():
    tr = toys.trainer()
    scenes, graphs, caps = _batch(tr)
    params = dict(tr.model.named_parameters())

    def grads(which):
        out = tr.model.losses(scenes, graphs, caps, 0.3, 0.01)
        lc, ls = out["L_c"].sum(), out["L_s"].sum()
        return backward({"c": lc, "s": ls, "t": total_loss(lc, ls, 0.1)}[which], params)

    gc, gs, gt = grads("c"), grads("s"), grads("t")
    for name in params:
        np.testing.assert_allclose(gt[name], gc[name] + 0.1 * gs[name], rtol=0, atol=1e-10)


def test_semantic_loss_descent_step():
    tr = toys.trainer(seed=1)
    scenes, graphs, caps = _batch(tr)
    alphas = tr.model.losses(scenes, graphs, caps, 0.3, 0.01)["alphas"].detach()
    lengths = [len(c) + 1 for c in caps]
    params = {f"phi.{k}": v for k, v in tr.model.phi.named_parameters()}
    params["W"] = tr.model.criterion.W

    def ls():
        # frozen selection and fixed attention
        sem = tr.model.encode_batch(scenes, graphs)["semantic"]
        return sum(semantic_loss(alphas[b, : lengths[b], : len(sh)], sh, sr, st, tr.model.criterion.W)
                   for b, (sh, sr, st) in enumerate(sem))

    before = ls()
    g = backward(before, params)
    with torch.no_grad():
        for k, p in params.items():
            p -= 1e-4 * torch.from_numpy(g[k])
    assert ls().item() < before.item()


def test_full_pipeline_gradient():
    tr = toys.trainer(seed=2, warmup_epochs=0)
    scenes, graphs, caps = _batch(tr)
    assert len(tr.vocab) - 4 == 5 and len(scenes) == 2
    assert any(len(g.triplets) for g in graphs)

    # attention enters L_s as a constant, so it is frozen at the check point
    alphas = tr.model.losses(scenes, graphs, caps, 0.3, 0.01)["alphas"].detach()
    lengths = [len(c) + 1 for c in caps]
    W = tr.model.criterion.W

    def f():
        out = tr.model.losses(scenes, graphs, caps, 0.3, 0.01)
        sem = tr.model.encode_batch(scenes, graphs)["semantic"]
        ls = sum(semantic_loss(alphas[b, : lengths[b], : len(sh)], sh, sr, st, W, 0.3, 0.01, -5.0)
                 for b, (sh, sr, st) in enumerate(sem))
        return total_loss(out["L_c"].sum(), ls, 0.1)

    assert finite_diff_check(f, dict(tr.model.named_parameters())) < 1e-4


def _params(tr):
    return {k: v.detach().clone() for k, v in tr.model.named_parameters()}


def test_beta_zero_trajectory_ignores_lambda_and_gamma():
    runs = []
    for lam, gamma in [(0.01, 0.3), (0.5, 0.9)]:
        tr = toys.trainer(beta_after_warmup=0.0, lam=lam, gamma=gamma, iterations=1, epochs_per_iteration=3)
        tr.fit()
        runs.append((_params(tr), [r["L_c"] for r in tr.reports]))
    (pa, la), (pb, lb) = runs
    assert la == lb and all(torch.equal(pa[k], pb[k]) for k in pa)


def test_training_overfits_toy_captions():
    caps = [["a", "dog", "on", "grass"], ["a", "cat", "on", "mat"], ["two", "birds", "in", "tree"]]
    tr = toys.trainer(caps, iterations=1, epochs_per_iteration=150, learning_rate=0.02, batch_size=3,
                      patience=1000, **{**toys.SMALL, "embed_dim": 8, "hidden": 12})
    tr.fit()
    T = np.mean([len(c) + 1 for c in caps])
    assert tr.reports[-1]["L_c"] < 0.05 * T * math.log(len(tr.vocab))


# ---------------------------------------------------------------------------
# alternation
# ---------------------------------------------------------------------------


def test_first_iteration_uses_knowledge_initialised_cache():
    tr = toys.trainer()
    for s in tr.all_scenes:
        assert np.array_equal(tr.cache[s.scene_id], init_cache_entry(s.proposals, tr.model.semantic_dim))
    tr.fit()
    assert [set(e["cache_version"].values()) for e in tr.selection_log] == [{0}, {1}]
    assert tr.iteration == 2 and tr.epoch == 4


def test_selection_reads_previous_cache():
    tr = toys.trainer(iterations=1)
    tr.fit()
    expected = {s.scene_id: tr.model.select_graph(s, tr.cache[s.scene_id], tr.config.max_graph_size)
                for s in tr.all_scenes}
    assert tr.select_graphs() == expected


def test_empty_training_set_is_rejected():
    tr = toys.trainer()
    with pytest.raises(ConfigError):
        JointTrainer([], [], tr.vocab, tr.config)


def test_same_seed_same_history():
    a, b = toys.trainer(n_val=1, captions=toys.FIVE_WORDS * 2), toys.trainer(n_val=1, captions=toys.FIVE_WORDS * 2)
    a.fit(), b.fit()
    assert a.reports == b.reports and a.iteration_metrics == b.iteration_metrics


def test_reports_csv(tmp_path):
    tr = toys.trainer()
    tr.fit()
    write_reports(tr.reports, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].split(",") == REPORT_COLUMNS and len(lines) == 1 + len(tr.reports)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_container_round_trip(rng, tmp_path):
    blocks = {"a": rng.normal(size=(2, 3)), "b": np.array(4.5), "c": np.zeros((0, 2))}
    checkpoint.save(tmp_path / "x.ckpt", {"k": [1, "two"]}, blocks)
    meta, back = checkpoint.load(tmp_path / "x.ckpt")
    assert meta == {"k": [1, "two"]}
    assert all(np.array_equal(back[k], v) and back[k].shape == v.shape for k, v in blocks.items())


@pytest.mark.parametrize("damage", ["truncate", "magic", "version", "flip"])
def test_corrupt_container_is_rejected(rng, damage):
    data = bytearray(checkpoint.encode({}, {"a": rng.normal(size=4)}))
    if damage == "truncate":
        data = data[:-3]
    elif damage == "magic":
        data[:4] = b"XXXX"
    elif damage == "version":
        data[4] = 9
    else:
        data[-1] ^= 1
    with pytest.raises(LoadError):
        checkpoint.decode(bytes(data))


def test_trainer_save_load_save_is_byte_identical(tmp_path):
    tr = toys.trainer()
    tr.fit(max_iterations=1)
    tr.save(tmp_path / "a.ckpt")
    back = JointTrainer.from_checkpoint(tmp_path / "a.ckpt", tr.train_scenes, tr.val_scenes)
    back.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert back.rng.bit_generator.state == tr.rng.bit_generator.state
    assert all(torch.equal(a, b) for a, b in zip(tr.model.parameters(), back.model.parameters()))


def test_resume_matches_uninterrupted_run(tmp_path):
    full = toys.trainer(iterations=3)
    full.fit()
    part = toys.trainer(iterations=3)
    part.fit(max_iterations=1)
    part.save(tmp_path / "p.ckpt")
    resumed = JointTrainer.from_checkpoint(tmp_path / "p.ckpt", part.train_scenes, part.val_scenes)
    resumed.fit()
    assert resumed.reports == full.reports and resumed.iteration_metrics == full.iteration_metrics
    assert all(torch.equal(a, b) for a, b in zip(full.model.parameters(), resumed.model.parameters()))


def test_truncated_checkpoint_leaves_trainer_untouched(tmp_path):
    tr = toys.trainer()
    tr.save(tmp_path / "a.ckpt")
    data = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "a.ckpt").write_bytes(data[: len(data) // 2])
    before = _params(tr)
    with pytest.raises(LoadError):
        JointTrainer.from_checkpoint(tmp_path / "a.ckpt", tr.train_scenes, tr.val_scenes)
    assert all(torch.equal(before[k], v) for k, v in tr.model.named_parameters())
