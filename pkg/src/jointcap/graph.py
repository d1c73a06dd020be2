"""Semantic mapping, the complex triplet criterion, and semantic-graph selection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import DimensionError
from .kg import trilinear_expanded
from .mapping import CandidateProposalSet

SCORE_FLOOR = -1.0


class SemanticMapper(nn.Module):
    """s = layer2(tanh(layer1([v; k])))."""

    def __init__(self, visual_dim: int, knowledge_dim: int, semantic_dim: int = 256, hidden: int = 512):
        super().__init__()
        self.visual_dim = visual_dim
        self.knowledge_dim = knowledge_dim
        self.layer1 = nn.Linear(visual_dim + knowledge_dim, hidden)
        self.layer2 = nn.Linear(hidden, semantic_dim)

    @property
    def semantic_dim(self):
        return self.layer2.out_features

    def forward(self, v, k):
        if v.shape[-1] != self.visual_dim or k.shape[-1] != self.knowledge_dim:
            raise DimensionError(
                f"semantic mapper expects ({self.visual_dim}, {self.knowledge_dim}) inputs, "
                f"got ({v.shape[-1]}, {k.shape[-1]})"
            )
        return self.layer2(torch.tanh(self.layer1(torch.cat([v, k], dim=-1))))


def semantic_map(v, k, mapper: SemanticMapper):
    return mapper(v, k)


class Criterion(nn.Module):
    """Holds W, mapping L_s reals to ``complex_dim`` complex numbers (real rows first)."""

    def __init__(self, semantic_dim: int, complex_dim: int):
        super().__init__()
        self.W = nn.Parameter(torch.zeros(2 * complex_dim, semantic_dim))

    @property
    def complex_dim(self):
        return self.W.shape[0] // 2

    def convert(self, s):
        c = s @ self.W.T
        L = self.complex_dim
        return c[..., :L], c[..., L:]

    def forward(self, s_h, s_r, s_t):
        return criterion_score(s_h, s_r, s_t, self.W)


def criterion_score(s_h, s_r, s_t, W):
    """Re(<W s_h, W s_r, conj(W s_t)>) via the four-term real expansion.

    Broadcasts over leading dimensions of the semantic features.
    """
    if not (s_h.shape[-1] == s_r.shape[-1] == s_t.shape[-1] == W.shape[-1]):
        raise DimensionError("semantic feature length does not match W")
    L = W.shape[0] // 2
    ch, cr, ct = s_h @ W.T, s_r @ W.T, s_t @ W.T
    return trilinear_expanded(ch[..., :L], ch[..., L:], cr[..., :L], cr[..., L:], ct[..., :L], ct[..., L:])


# ---------------------------------------------------------------------------
# candidates and selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Triplet:
    head: int
    relation: int
    tail: int
    tail_role: str  # "object" or "attribute"
    score: float = float("nan")

    def key(self):
        return (self.head, self.relation, 0 if self.tail_role == "object" else 1, self.tail)

    def entity_vertices(self):
        return {("object", self.head), (self.tail_role, self.tail)}

    def with_score(self, score):
        return Triplet(self.head, self.relation, self.tail, self.tail_role, float(score))


def enumerate_candidates(num_objects: int, num_relations: int) -> list[Triplet]:
    """All (object head, relation, object-or-attribute tail), head-major.

    Object tails exclude the head itself; attribute vertex ``i`` sits on the
    same proposal as object ``i`` and may follow any head.
    """
    out = []
    for h in range(num_objects):
        for r in range(num_relations):
            for t in range(num_objects):
                if t != h:
                    out.append(Triplet(h, r, t, "object"))
            for t in range(num_objects):
                out.append(Triplet(h, r, t, "attribute"))
    return out


def vertex_offsets(num_objects: int, num_relations: int):
    """Row offsets of each role in the stacked [objects; relations; attributes] layout."""
    return {"object": 0, "relationship": num_objects, "attribute": num_objects + num_relations}


def triplet_rows(triplets, num_objects, num_relations):
    """Stacked-layout row indices (head, relation, tail) for each triplet."""
    off = vertex_offsets(num_objects, num_relations)
    h = np.array([t.head for t in triplets], dtype=np.int64)
    r = np.array([off["relationship"] + t.relation for t in triplets], dtype=np.int64)
    tl = np.array([off[t.tail_role] + t.tail for t in triplets], dtype=np.int64)
    return h, r, tl


def score_candidates(features, num_objects, num_relations, W, candidates=None):
    """Criterion scores for every candidate over stacked vertex features."""
    candidates = candidates if candidates is not None else enumerate_candidates(num_objects, num_relations)
    if not candidates:
        return []
    S = torch.as_tensor(features)
    h, r, t = triplet_rows(candidates, num_objects, num_relations)
    with torch.no_grad():
        scores = criterion_score(S[h], S[r], S[t], torch.as_tensor(W)).numpy()
    return [c.with_score(s) for c, s in zip(candidates, scores)]


@dataclass
class SemanticGraph:
    num_objects: int
    num_relations: int
    triplets: list[Triplet] = field(default_factory=list)

    @property
    def size(self):
        return len(self.triplets)

    @property
    def num_vertices(self):
        return 2 * self.num_objects + self.num_relations


def select_triplets(candidates, max_size: int = 16, num_objects=None, num_relations=None) -> SemanticGraph:
    """Greedy suppression in descending score order.

    Candidates scoring below -1 are dropped first. A candidate is suppressed
    when it shares both of its entity vertices (head and tail) with an
    already selected triplet. Ties go to canonical enumeration order.
    """
    cands = [c for c in candidates if c.score >= SCORE_FLOOR]
    cands.sort(key=lambda c: (-c.score, c.key()))
    chosen: list[Triplet] = []
    for c in cands:
        if len(chosen) >= max_size:
            break
        ents = c.entity_vertices()
        if any(len(ents & s.entity_vertices()) >= 2 for s in chosen):
            continue
        chosen.append(c)
    if num_objects is None:
        num_objects = 1 + max([c.head for c in candidates] + [c.tail for c in candidates], default=-1)
    if num_relations is None:
        num_relations = 1 + max([c.relation for c in candidates], default=-1)
    return SemanticGraph(num_objects, num_relations, chosen)


def build_graph(features, proposals: CandidateProposalSet, W, max_size=16) -> SemanticGraph:
    """Score all candidates of a scene on ``features`` and select its graph."""
    n, f = proposals.num_objects, proposals.num_relations
    scored = score_candidates(features, n, f, W)
    return select_triplets(scored, max_size, n, f)


# ---------------------------------------------------------------------------
# semantic cache
# ---------------------------------------------------------------------------


def init_cache_entry(proposals: CandidateProposalSet, semantic_dim: int) -> np.ndarray:
    """Knowledge rows zero-padded or truncated to the semantic dimension."""
    K = proposals.knowledge()
    out = np.zeros((len(K), semantic_dim))
    m = min(semantic_dim, K.shape[1])
    out[:, :m] = K[:, :m]
    return out


def update_cache_entry(proposals: CandidateProposalSet, mapper: SemanticMapper) -> np.ndarray:
    with torch.no_grad():
        return mapper(torch.from_numpy(proposals.visual()), torch.from_numpy(proposals.knowledge())).numpy().copy()
