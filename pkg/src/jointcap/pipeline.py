"""Stage functions shared by the CLI and the experiment scripts.

All stages read and write inside one working directory.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .data import Dataset, ingest_scenes
from .decoder import Vocabulary
from .export import export_graph, vertex_names
from .errors import ConfigError, LoadError
from .graph import SemanticGraph, update_cache_entry
from .kg import ComplexEmbeddingTable, KGConfig, load_triples, train_kg_embeddings
from .mapping import (
    ROLE_FIELDS,
    MappingConfig,
    MappingNetwork,
    build_proposal_set,
    load_lexicon,
    make_mapping_networks,
    mean_average_precision,
    multilabel_scores,
    scene_labels,
    train_mapping_networks,
)
from .metrics import bleu4, cider_scores, corpus_bleu4
from .model import SceneInput
from .train import JointTrainer, TrainConfig, load_model, write_reports

log = logging.getLogger(__name__)

FILES = {
    "concepts": "concepts.tsv",
    "triples": "triples.tsv",
    "lexicon": "lexicon.tsv",
    "scenes": "scenes.jsonl",
    "splits": "splits.json",
    "embeddings": "embeddings.bin",
    "mapping": "mapping.ckpt",
    "model": "model.ckpt",
    "reports": "reports.csv",
    "iterations": "iterations.csv",
    "captions": "captions.tsv",
    "metrics": "metrics.json",
}


def path_of(workdir, key) -> Path:
    return Path(workdir) / FILES[key]


# ---------------------------------------------------------------------------
# knowledge graph
# ---------------------------------------------------------------------------


def load_store(workdir):
    return load_triples(path_of(workdir, "triples"), path_of(workdir, "concepts"))


def run_kg_train(workdir, config: KGConfig):
    store = load_store(workdir)
    table = train_kg_embeddings(store, config)
    table.save(path_of(workdir, "embeddings"))
    return table


# ---------------------------------------------------------------------------
# mapping networks
# ---------------------------------------------------------------------------


def role_lexicons(store, lexicon_path):
    """Role vocabularies in embedding-table order, checked against the lexicon."""
    lex = load_lexicon(lexicon_path)
    out = {}
    for role in ROLE_FIELDS:
        vocab = [c.lower() for c in store.role_concepts(role)]
        missing = sorted(set(vocab) - set(lex[role]))
        if missing:
            raise ConfigError(f"lexicon lacks {role} concepts: {missing}")
        out[role] = vocab
    return out


def save_mapping(path, networks: dict[str, MappingNetwork], config: MappingConfig):
    meta = {
        "kind": "jointcap-mapping",
        "config": asdict(config),
        "in_dim": networks["object"].mapper.W1.in_features,
        "role_sizes": {r: n.head.num_concepts for r, n in networks.items()},
    }
    blocks = {}
    for net in networks.values():
        for name, p in net.named_parameters():
            blocks[name] = p.detach().numpy()
    checkpoint.save(path, meta, blocks)


def networks_from_blocks(meta, blocks, prefix=""):
    cfg = MappingConfig(**meta["config"])
    nets = make_mapping_networks(meta["in_dim"], meta["role_sizes"], cfg.hidden, cfg.heads)
    with torch.no_grad():
        for net in nets.values():
            for name, p in net.named_parameters():
                key = prefix + name
                if key not in blocks:
                    raise LoadError(f"missing mapping block {key}")
                p.copy_(torch.from_numpy(blocks[key]))
    return nets, cfg


def load_mapping(path):
    meta, blocks = checkpoint.load(path)
    if meta.get("kind") != "jointcap-mapping":
        raise LoadError(f"{path} is not a mapping checkpoint")
    return networks_from_blocks(meta, blocks)


def run_map_train(workdir, config: MappingConfig):
    ds = ingest_scenes(path_of(workdir, "scenes"), path_of(workdir, "splits"))
    store = load_store(workdir)
    lex = role_lexicons(store, path_of(workdir, "lexicon"))
    train = ds.split("train")
    labels = [scene_labels(r.captions, lex) for r in train]
    regions = [r.regions for r in train]
    sizes = {role: len(v) for role, v in lex.items()}
    nets = make_mapping_networks(regions[0].shape[1], sizes, config.hidden, config.heads,
                                 rng=np.random.default_rng(config.seed))
    train_mapping_networks(regions, labels, nets, config)
    save_mapping(path_of(workdir, "mapping"), nets, config)
    k = min(config.k_max, min(len(r) for r in regions))
    maps = {}
    for role, net in nets.items():
        scores = multilabel_scores(regions, net, k, seed=config.seed, pair_limit=config.pair_limit)
        maps[role] = mean_average_precision(scores, np.array([lab.for_role(role) for lab in labels]))
    return nets, maps


# ---------------------------------------------------------------------------
# joint training
# ---------------------------------------------------------------------------


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def build_proposals(ds: Dataset, networks, table, store, config: TrainConfig, only=None):
    # The clustering seed depends on the scene's position in the corpus file.
    role_idx = {role: store.role_indices(role) for role in ROLE_FIELDS}
    out = {}
    for n, (sid, rec) in enumerate(ds.records.items()):
        if only is not None and sid not in only:
            continue
        out[sid] = build_proposal_set(sid, rec.regions, networks, table, role_idx, (config.k_min, config.k_max),
                                      config.pair_limit, seed=scene_seed(config.seed, n))
    return out


def scene_inputs(records, proposals, vocab):
    return [SceneInput.build(r.scene_id, proposals[r.scene_id], r.global_feat, r.captions, vocab) for r in records]


@dataclass
class Workspace:
    dataset: Dataset
    store: object
    table: ComplexEmbeddingTable
    networks: dict
    mapping_config: MappingConfig
    proposals: dict = field(default_factory=dict)


def load_workspace(workdir, config: TrainConfig) -> Workspace:
    ds = ingest_scenes(path_of(workdir, "scenes"), path_of(workdir, "splits"))
    store = load_store(workdir)
    table = ComplexEmbeddingTable.load(path_of(workdir, "embeddings"))
    nets, mcfg = load_mapping(path_of(workdir, "mapping"))
    ws = Workspace(ds, store, table, nets, mcfg)
    ws.proposals = build_proposals(ds, nets, table, store, config)
    return ws


def mapping_blocks(ws: Workspace):
    blocks = {"table.real": ws.table.real, "table.imag": ws.table.imag}
    for net in ws.networks.values():
        for name, p in net.named_parameters(prefix="mapping."):
            blocks[name] = p.detach().numpy()
    meta = {
        "mapping_config": asdict(ws.mapping_config),
        "in_dim": ws.networks["object"].mapper.W1.in_features,
        "role_sizes": {r: n.head.num_concepts for r, n in ws.networks.items()},
    }
    return meta, blocks


def make_trainer(ws: Workspace, config: TrainConfig) -> JointTrainer:
    train = ws.dataset.split("train")
    vocab = Vocabulary.build([c for r in train for c in r.captions])
    return JointTrainer(scene_inputs(train, ws.proposals, vocab), scene_inputs(ws.dataset.split("val"), ws.proposals, vocab),
                        vocab, config)


def run_train(workdir, config: TrainConfig, trainer: JointTrainer | None = None):
    ws = load_workspace(workdir, config)
    trainer = trainer or make_trainer(ws, config)
    extra_meta, extra_blocks = mapping_blocks(ws)

    def checkpoint_iteration(tr):
        tr.save(path_of(workdir, "model"), extra_meta, extra_blocks)
        write_reports(tr.reports, path_of(workdir, "reports"))
        write_iterations(tr.iteration_metrics, path_of(workdir, "iterations"))

    trainer.fit(on_iteration=checkpoint_iteration)
    return trainer


def resume_train(workdir, max_iterations=None):
    """Continue a run from the working directory's checkpoint."""
    meta, _ = checkpoint.load(path_of(workdir, "model"))
    config = TrainConfig.from_dict(meta["config"])
    ws = load_workspace(workdir, config)
    train = ws.dataset.split("train")
    vocab = Vocabulary(meta["vocab"])
    trainer = JointTrainer.from_checkpoint(path_of(workdir, "model"), scene_inputs(train, ws.proposals, vocab),
                                           scene_inputs(ws.dataset.split("val"), ws.proposals, vocab))
    extra_meta, extra_blocks = mapping_blocks(ws)

    def checkpoint_iteration(tr):
        tr.save(path_of(workdir, "model"), extra_meta, extra_blocks)
        write_reports(tr.reports, path_of(workdir, "reports"))
        write_iterations(tr.iteration_metrics, path_of(workdir, "iterations"))

    trainer.fit(max_iterations, on_iteration=checkpoint_iteration)
    return trainer


def write_iterations(rows, path):
    cols = ["iteration", "epochs", "val_BLEU4", "val_CIDEr", "val_score"]
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join([str(r["iteration"]), str(r["epochs"])] + [f"{r[c]:.6g}" for c in cols[2:]]))
    tmp = Path(str(path) + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


@dataclass
class LoadedModel:
    model: object
    vocab: Vocabulary
    config: TrainConfig
    networks: dict
    table: ComplexEmbeddingTable


def load_trained(workdir) -> LoadedModel:
    model, vocab, config, meta, blocks = load_model(path_of(workdir, "model"))
    extra = meta["extra"]
    nets, _ = networks_from_blocks(
        {"config": extra["mapping_config"], "in_dim": extra["in_dim"], "role_sizes": extra["role_sizes"]},
        blocks, prefix="mapping.",
    )
    table = ComplexEmbeddingTable(blocks["table.real"], blocks["table.imag"])
    return LoadedModel(model, vocab, config, nets, table)


def scene_graphs(lm: LoadedModel, scenes) -> dict[str, SemanticGraph]:
    out = {}
    for s in scenes:
        feats = update_cache_entry(s.proposals, lm.model.phi)
        out[s.scene_id] = lm.model.select_graph(s, feats, lm.config.max_graph_size)
    return out


def run_caption(workdir, split="test", beam=None, out_path=None):
    lm = load_trained(workdir)
    ds = ingest_scenes(path_of(workdir, "scenes"), path_of(workdir, "splits"))
    store = load_store(workdir)
    proposals = build_proposals(ds, lm.networks, lm.table, store, lm.config)
    scenes = scene_inputs(ds.split(split), proposals, lm.vocab)
    graphs = scene_graphs(lm, scenes)
    width = beam or lm.config.beam
    lines = []
    results = {}
    for s in scenes:
        cap = lm.model.beam(s, graphs[s.scene_id], width, lm.config.max_len)
        words = lm.vocab.decode(cap.tokens)
        results[s.scene_id] = (words, cap.logprob)
        lines.append(f"{s.scene_id}\t{' '.join(words)}\t{cap.logprob:.6g}\n")
    out_path = Path(out_path) if out_path else path_of(workdir, "captions")
    tmp = out_path.with_name(out_path.name + ".tmp")
    tmp.write_text("".join(lines), encoding="utf-8")
    tmp.replace(out_path)
    return results


def read_captions(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            sid, text, logprob = line.rstrip("\n").split("\t")
            out[sid] = (text.split(), float(logprob))
    return out


def metrics_report(candidates: dict, dataset: Dataset, smooth=False) -> dict:
    ids = [sid for sid in candidates if sid in dataset.records]
    cands = [candidates[sid] for sid in ids]
    refs = [dataset.records[sid].captions for sid in ids]
    per_scene = {sid: bleu4(c, r, smooth=smooth) for sid, c, r in zip(ids, cands, refs)}
    cid, degenerate = cider_scores(cands, refs) if ids else (np.zeros(0), True)
    return {
        "scenes": len(ids),
        "corpus_BLEU4": float(f"{corpus_bleu4(cands, refs, smooth=smooth):.6g}") if ids else 0.0,
        "corpus_CIDEr": float(f"{float(np.mean(cid)) if len(cid) else 0.0:.6g}"),
        "cider_degenerate": bool(degenerate),
        "per_scene_BLEU4": {k: float(f"{v:.6g}") for k, v in per_scene.items()},
    }


def run_eval(workdir, captions_path=None, out_path=None, smooth=False):
    ds = ingest_scenes(path_of(workdir, "scenes"), path_of(workdir, "splits"))
    caps = read_captions(captions_path or path_of(workdir, "captions"))
    report = metrics_report({k: v[0] for k, v in caps.items()}, ds, smooth)
    out_path = Path(out_path) if out_path else path_of(workdir, "metrics")
    tmp = out_path.with_name(out_path.name + ".tmp")
    tmp.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(out_path)
    return report


def run_export_graph(workdir, scene_id, out_path=None):
    lm = load_trained(workdir)
    ds = ingest_scenes(path_of(workdir, "scenes"), path_of(workdir, "splits"))
    if scene_id not in ds.records:
        raise ConfigError(f"unknown scene {scene_id!r}")
    store = load_store(workdir)
    proposals = build_proposals(ds, lm.networks, lm.table, store, lm.config, only={scene_id})
    scene = scene_inputs([ds.records[scene_id]], proposals, lm.vocab)[0]
    graph = scene_graphs(lm, [scene])[scene_id]
    names = vertex_names(scene.proposals, {r: store.role_concepts(r) for r in ROLE_FIELDS})
    out_path = Path(out_path) if out_path else Path(workdir) / f"graph_{scene_id}.dot"
    return export_graph(graph, names, out_path)
