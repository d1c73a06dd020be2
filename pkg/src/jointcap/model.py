"""The joint captioning model: semantic mapping, criterion, graph encoder and decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .decoder import EOS_ID, CaptionDecoder, GraphEncoder, SceneStepper, beam_search, greedy_decode, greedy_decode_batch
from .losses import semantic_loss
from .graph import Criterion, SemanticGraph, SemanticMapper, build_graph, triplet_rows
from .mapping import CandidateProposalSet
from .numeric import init_module


@dataclass
class SceneInput:
    """Everything the joint model consumes for one scene."""

    scene_id: str
    proposals: CandidateProposalSet
    visual: torch.Tensor
    knowledge: torch.Tensor
    global_feat: torch.Tensor
    captions: list[list[int]]
    references: list[list[str]]

    @classmethod
    def build(cls, scene_id, proposals, global_feat, references, vocab):
        return cls(
            scene_id,
            proposals,
            torch.from_numpy(proposals.visual()),
            torch.from_numpy(proposals.knowledge()),
            torch.as_tensor(np.asarray(global_feat, dtype=np.float64)),
            [vocab.encode(r, warn=True) for r in references],
            references,
        )


class JointModel(nn.Module):
    def __init__(self, visual_dim, knowledge_dim, global_dim, vocab_size, semantic_dim=256, semantic_hidden=512,
                 complex_dim=None, gcn_layers=2, embed_dim=512, hidden=512, att_hidden=512):
        super().__init__()
        complex_dim = complex_dim or max(1, knowledge_dim // 2)
        self.phi = SemanticMapper(visual_dim, knowledge_dim, semantic_dim, semantic_hidden)
        self.criterion = Criterion(semantic_dim, complex_dim)
        self.encoder = GraphEncoder(semantic_dim, gcn_layers)
        self.decoder = CaptionDecoder(vocab_size, 3 * semantic_dim, global_dim, embed_dim, hidden, att_hidden)

    def init_parameters(self, rng):
        init_module(self, rng)

    @property
    def semantic_dim(self):
        return self.phi.semantic_dim

    # -- graph helpers --------------------------------------------------

    def semantic_features(self, scene: SceneInput):
        return self.phi(scene.visual, scene.knowledge)

    def select_graph(self, scene: SceneInput, features, max_size) -> SemanticGraph:
        return build_graph(np.asarray(features), scene.proposals, self.criterion.W.detach(), max_size)

    def encode_batch(self, scenes, graphs):
        """Live semantic features, GCN encoding and padded triplet features.

        Returns a dict with the padded features/mask, the global features,
        and each scene's live (pre-GCN) head/relation/tail semantic features.
        """
        rows_h, rows_r, rows_t, counts = [], [], [], []
        base = 0
        for scene, graph in zip(scenes, graphs):
            h, r, t = triplet_rows(graph.triplets, scene.proposals.num_objects, scene.proposals.num_relations)
            rows_h.append(h + base)
            rows_r.append(r + base)
            rows_t.append(t + base)
            counts.append(len(h))
            base += len(scene.visual)
        V = torch.cat([s.visual for s in scenes])
        K = torch.cat([s.knowledge for s in scenes])
        S = self.phi(V, K)
        H = torch.from_numpy(np.concatenate(rows_h).astype(np.int64))
        R = torch.from_numpy(np.concatenate(rows_r).astype(np.int64))
        T = torch.from_numpy(np.concatenate(rows_t).astype(np.int64))
        X = self.encoder(S, H, R, T)
        trip = torch.cat([X[H], X[R], X[T]], dim=1) if len(H) else X.new_zeros((0, 3 * self.semantic_dim))
        per_scene = list(torch.split(trip, counts))
        feats, mask = self.decoder.pad_features(per_scene)
        semantic = list(zip(torch.split(S[H], counts), torch.split(S[R], counts), torch.split(S[T], counts)))
        return {
            "feats": feats,
            "mask": mask,
            "global": torch.stack([s.global_feat for s in scenes]),
            "semantic": semantic,
            "counts": counts,
        }

    # -- losses ---------------------------------------------------------

    def losses(self, scenes, graphs, captions, gamma, lam, score_floor=None):
        """Per-item caption NLL, semantic loss, and teacher-forced hits.

        ``captions`` holds one word-id list per scene (eos is appended here).
        Attention weights enter the semantic loss as constants.
        """
        enc = self.encode_batch(scenes, graphs)
        B = len(scenes)
        lengths = torch.tensor([len(c) + 1 for c in captions])
        T = int(lengths.max())
        targets = torch.zeros(B, T, dtype=torch.long)
        for b, c in enumerate(captions):
            targets[b, : len(c) + 1] = torch.tensor(list(c) + [EOS_ID])
        nll, alphas, correct = self.decoder.teacher_forced(enc["feats"], enc["mask"], enc["global"], targets, lengths)
        W = self.criterion.W
        ls = []
        for b, (sh, sr, st) in enumerate(enc["semantic"]):
            g = len(sh)
            ls.append(semantic_loss(alphas[b, : int(lengths[b]), :g], sh, sr, st, W, gamma, lam, score_floor))
        ls = torch.stack(ls)
        return {"L_c": nll, "L_s": ls, "correct": correct, "lengths": lengths, "alphas": alphas}

    # -- decoding -------------------------------------------------------

    def stepper(self, scene: SceneInput, graph: SemanticGraph):
        with torch.no_grad():
            enc = self.encode_batch([scene], [graph])
        feats = enc["feats"][0, : enc["counts"][0]]
        return SceneStepper(self.decoder, feats, scene.global_feat)

    def greedy(self, scene, graph, max_len):
        return greedy_decode(self.stepper(scene, graph), max_len)

    def beam(self, scene, graph, width, max_len):
        return beam_search(self.stepper(scene, graph), width, max_len)

    def greedy_batch(self, scenes, graphs, max_len):
        with torch.no_grad():
            enc = self.encode_batch(scenes, graphs)
            return greedy_decode_batch(self.decoder, enc["feats"], enc["mask"], enc["global"], max_len)
