"""Alternating optimisation of semantic-graph selection and captioning."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from . import checkpoint
from .decoder import Vocabulary
from .errors import ConfigError, LoadError
from .graph import init_cache_entry, update_cache_entry
from .losses import semantic_loss, total_loss  # noqa: F401  (re-exported)
from .metrics import cider_scores, corpus_bleu4
from .model import JointModel, SceneInput

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["epoch", "iteration", "L_c", "L_s", "beta", "val_BLEU4", "val_CIDEr"]


@dataclass
class TrainConfig:
    lam: float = 0.01
    gamma: float = 0.3
    # -inf recovers the unbounded objective
    score_floor: float = -5.0
    beta_after_warmup: float = 0.1
    warmup_epochs: int = 5
    learning_rate: float = 5e-4
    epochs_per_iteration: int = 100
    iterations: int = 5
    patience: int = 10
    batch_size: int = 10
    seed: int = 0
    max_graph_size: int = 16
    beam: int = 3
    max_len: int = 16
    k_min: int = 5
    k_max: int = 10
    pair_limit: int = 64
    semantic_dim: int = 256
    semantic_hidden: int = 512
    gcn_layers: int = 2
    embed_dim: int = 512
    hidden: int = 512
    att_hidden: int = 512

    def validate(self):
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if not 0 <= self.gamma <= 1:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if self.iterations < 1 or self.epochs_per_iteration < 1 or self.batch_size < 1:
            raise ConfigError("iterations, epochs and batch size must be positive")
        if self.beam < 1:
            raise ConfigError("beam width must be at least 1")
        if not 1 <= self.k_min <= self.k_max:
            raise ConfigError("cluster range must satisfy 1 <= k_min <= k_max")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def beta_schedule(epoch: int, config: TrainConfig) -> float:
    return 0.0 if epoch < config.warmup_epochs else config.beta_after_warmup


def convergence_check(history, patience: int) -> bool:
    """True once the best score is at least ``patience`` epochs old."""
    if len(history) < 2:
        return False
    best = int(np.argmax(history))
    return len(history) - 1 - best >= patience


def build_model(config: TrainConfig, visual_dim, knowledge_dim, global_dim, vocab_size) -> JointModel:
    return JointModel(
        visual_dim, knowledge_dim, global_dim, vocab_size,
        semantic_dim=config.semantic_dim, semantic_hidden=config.semantic_hidden,
        gcn_layers=config.gcn_layers, embed_dim=config.embed_dim, hidden=config.hidden,
        att_hidden=config.att_hidden,
    )


class JointTrainer:
    """Alternates graph selection with captioning and owns all mutable training state.

    Each iteration selects every scene's graph from the semantic cache,
    trains the captioner for up to ``epochs_per_iteration`` epochs on
    ``L_c + beta * L_s``, then refreshes the cache with the current semantic
    mapper. One numpy generator drives initialisation and shuffling.
    """

    def __init__(self, train_scenes: list[SceneInput], val_scenes: list[SceneInput], vocab: Vocabulary,
                 config: TrainConfig, model: JointModel | None = None):
        config.validate()
        if not train_scenes:
            raise ConfigError("training set is empty")
        self.config = config
        self.vocab = vocab
        self.train_scenes = train_scenes
        self.val_scenes = val_scenes
        self.rng = np.random.default_rng(config.seed)
        first = train_scenes[0]
        self.dims = {
            "visual": int(first.visual.shape[1]),
            "knowledge": int(first.knowledge.shape[1]),
            "global": int(first.global_feat.shape[0]),
        }
        if model is None:
            model = build_model(config, self.dims["visual"], self.dims["knowledge"], self.dims["global"], len(vocab))
            model.init_parameters(self.rng)
        self.model = model
        self.opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        self.cache = {s.scene_id: init_cache_entry(s.proposals, model.semantic_dim) for s in self.all_scenes}
        self.cache_version = {s.scene_id: 0 for s in self.all_scenes}
        self.iteration = 0
        self.epoch = 0
        self.history: list[float] = []
        self.reports: list[dict] = []
        self.iteration_metrics: list[dict] = []
        self.converged = False
        self.selection_log: list[dict] = []
        self.graphs: dict = {}
        self.items = [(i, j) for i, s in enumerate(train_scenes) for j in range(len(s.captions))]

    @property
    def all_scenes(self):
        return list(self.train_scenes) + list(self.val_scenes)

    # -- alternation steps ----------------------------------------------

    def select_graphs(self):
        graphs = {}
        for s in self.all_scenes:
            graphs[s.scene_id] = self.model.select_graph(s, self.cache[s.scene_id], self.config.max_graph_size)
        self.selection_log.append({"iteration": self.iteration, "cache_version": dict(self.cache_version)})
        return graphs

    def update_cache(self):
        for s in self.all_scenes:
            self.cache[s.scene_id] = update_cache_entry(s.proposals, self.model.phi)
            self.cache_version[s.scene_id] = self.iteration + 1

    def train_epoch(self, graphs):
        cfg = self.config
        beta = beta_schedule(self.epoch, cfg)
        self.model.train()
        order = self.rng.permutation(len(self.items))
        sums = {"L_c": 0.0, "L_s": 0.0, "correct": 0.0, "tokens": 0.0}
        for start in range(0, len(order), cfg.batch_size):
            batch = [self.items[k] for k in order[start:start + cfg.batch_size]]
            scenes = [self.train_scenes[i] for i, _ in batch]
            caps = [self.train_scenes[i].captions[j] for i, j in batch]
            out = self.model.losses(scenes, [graphs[s.scene_id] for s in scenes], caps, cfg.gamma, cfg.lam, cfg.score_floor)
            lc, ls = out["L_c"].mean(), out["L_s"].mean()
            loss = total_loss(lc, ls, beta) if beta > 0 else lc
            self.opt.zero_grad()
            loss.backward()
            self.opt.step()
            sums["L_c"] += lc.item() * len(batch)
            sums["L_s"] += ls.item() * len(batch)
            sums["correct"] += out["correct"].sum().item()
            sums["tokens"] += out["lengths"].sum().item()
        n = len(self.items)
        return {"L_c": sums["L_c"] / n, "L_s": sums["L_s"] / n, "beta": beta,
                "token_accuracy": sums["correct"] / sums["tokens"]}

    def evaluate(self, scenes, graphs, beam=None):
        """Corpus BLEU-4 and CIDEr of decoded captions (greedy unless ``beam``)."""
        if not scenes:
            return {"BLEU4": 0.0, "CIDEr": 0.0}
        self.model.eval()
        if beam is None:
            hyps = self.model.greedy_batch(scenes, [graphs[s.scene_id] for s in scenes], self.config.max_len)
        else:
            hyps = [self.model.beam(s, graphs[s.scene_id], beam, self.config.max_len).tokens for s in scenes]
        cands = [self.vocab.decode(h) for h in hyps]
        refs = [s.references for s in scenes]
        cid, _ = cider_scores(cands, refs)
        return {"BLEU4": corpus_bleu4(cands, refs), "CIDEr": float(np.mean(cid)), "captions": cands}

    def val_score(self, metrics):
        # CIDEr needs at least two scenes for a usable IDF.
        return metrics["CIDEr"] if len(self.val_scenes) >= 2 else metrics["BLEU4"]

    def run_iteration(self):
        cfg = self.config
        graphs = self.graphs = self.select_graphs()
        val_scenes = self.val_scenes or self.train_scenes
        for _ in range(cfg.epochs_per_iteration):
            stats = self.train_epoch(graphs)
            val = self.evaluate(val_scenes, graphs)
            self.history.append(self.val_score(val))
            self.reports.append({
                "epoch": self.epoch, "iteration": self.iteration, "L_c": stats["L_c"], "L_s": stats["L_s"],
                "beta": stats["beta"], "val_BLEU4": val["BLEU4"], "val_CIDEr": val["CIDEr"],
                "token_accuracy": stats["token_accuracy"],
            })
            log.info("iter %d epoch %d L_c %.6g L_s %.6g beta %.3g val %.6g", self.iteration, self.epoch,
                     stats["L_c"], stats["L_s"], stats["beta"], self.history[-1])
            self.epoch += 1
            if convergence_check(self.history, cfg.patience):
                self.converged = True
                break
        last = self.reports[-1]
        self.iteration_metrics.append({"iteration": self.iteration, "epochs": self.epoch,
                                       "val_BLEU4": last["val_BLEU4"], "val_CIDEr": last["val_CIDEr"],
                                       "val_score": self.history[-1]})
        self.update_cache()
        self.iteration += 1

    def fit(self, max_iterations=None, on_iteration=None):
        """Alternate until convergence or the iteration cap (``max_iterations`` stops early for resumption)."""
        stop = self.config.iterations if max_iterations is None else min(max_iterations, self.config.iterations)
        while self.iteration < stop and not self.converged:
            self.run_iteration()
            if on_iteration is not None:
                on_iteration(self)
        return self.iteration_metrics

    def current_graphs(self, scenes):
        """Graphs from freshly mapped semantic features (what the cache would hold after an update)."""
        out = {}
        for s in scenes:
            feats = update_cache_entry(s.proposals, self.model.phi)
            out[s.scene_id] = self.model.select_graph(s, feats, self.config.max_graph_size)
        return out

    # -- persistence -----------------------------------------------------

    def state(self, extra_meta=None, extra_blocks=None):
        blocks = {}
        for name, p in self.model.named_parameters():
            blocks[f"model.{name}"] = p.detach().numpy()
        opt_dtypes = {}
        for name, p in self.model.named_parameters():
            for key, val in self.opt.state.get(p, {}).items():
                blocks[f"opt.{name}.{key}"] = val.detach().to(torch.float64).numpy()
                opt_dtypes[key] = str(val.dtype).replace("torch.", "")
        for sid, arr in self.cache.items():
            blocks[f"cache.{sid}"] = arr
        blocks.update(extra_blocks or {})
        meta = {
            "kind": "jointcap-train",
            "config": asdict(self.config),
            "vocab": self.vocab.itos[4:],
            "dims": self.dims,
            "counters": {"iteration": self.iteration, "epoch": self.epoch},
            "converged": self.converged,
            "history": self.history,
            "reports": self.reports,
            "iteration_metrics": self.iteration_metrics,
            "cache_version": self.cache_version,
            "rng": self.rng.bit_generator.state,
            "opt_dtypes": opt_dtypes,
            "extra": extra_meta or {},
        }
        return meta, blocks

    def save(self, path, extra_meta=None, extra_blocks=None):
        meta, blocks = self.state(extra_meta, extra_blocks)
        checkpoint.save(path, meta, blocks)

    def restore(self, meta, blocks):
        if meta.get("kind") != "jointcap-train":
            raise LoadError("not a training checkpoint")
        self.config = TrainConfig.from_dict(meta["config"])
        named = dict(self.model.named_parameters())
        with torch.no_grad():
            for name, p in named.items():
                key = f"model.{name}"
                if key not in blocks or tuple(blocks[key].shape) != tuple(p.shape):
                    raise LoadError(f"checkpoint lacks a matching block for {name}")
                p.copy_(torch.from_numpy(blocks[key]))
        self.opt = torch.optim.Adam(self.model.parameters(), lr=self.config.learning_rate)
        dtypes = meta.get("opt_dtypes", {})
        for name, p in named.items():
            state = {}
            for key, dt in dtypes.items():
                b = blocks.get(f"opt.{name}.{key}")
                if b is not None:
                    state[key] = torch.tensor(b, dtype=getattr(torch, dt))
            if state:
                self.opt.state[p] = state
        for sid in self.cache:
            self.cache[sid] = blocks[f"cache.{sid}"].copy()
        self.cache_version = dict(meta["cache_version"])
        self.iteration = meta["counters"]["iteration"]
        self.epoch = meta["counters"]["epoch"]
        self.converged = meta["converged"]
        self.history = list(meta["history"])
        self.reports = list(meta["reports"])
        self.iteration_metrics = list(meta["iteration_metrics"])
        self.rng.bit_generator.state = meta["rng"]

    @classmethod
    def from_checkpoint(cls, path, train_scenes, val_scenes):
        meta, blocks = checkpoint.load(path)
        if meta.get("kind") != "jointcap-train":
            raise LoadError("not a training checkpoint")
        config = TrainConfig.from_dict(meta["config"])
        vocab = Vocabulary(meta["vocab"])
        d = meta["dims"]
        model = build_model(config, d["visual"], d["knowledge"], d["global"], len(vocab))
        trainer = cls(train_scenes, val_scenes, vocab, config, model=model)
        trainer.restore(meta, blocks)
        return trainer


def load_model(path):
    """Model, vocabulary, config, metadata and raw blocks from a training checkpoint."""
    meta, blocks = checkpoint.load(path)
    if meta.get("kind") != "jointcap-train":
        raise LoadError("not a training checkpoint")
    config = TrainConfig.from_dict(meta["config"])
    vocab = Vocabulary(meta["vocab"])
    d = meta["dims"]
    model = build_model(config, d["visual"], d["knowledge"], d["global"], len(vocab))
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(blocks[f"model.{name}"]))
    model.eval()
    return model, vocab, config, meta, blocks


def train_joint(train_scenes, val_scenes, vocab, config: TrainConfig, model=None, max_iterations=None):
    """Convenience wrapper: build a trainer, alternate to convergence, return it."""
    trainer = JointTrainer(train_scenes, val_scenes, vocab, config, model=model)
    trainer.fit(max_iterations)
    return trainer


def write_reports(rows, path):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], r["iteration"]] + [f"{r[c]:.6g}" for c in REPORT_COLUMNS[2:]])
    os.replace(tmp, path)
