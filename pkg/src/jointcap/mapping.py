"""Visual mapping (region clustering) and knowledge mapping (multi-label soft assignment)."""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.metrics import average_precision_score
from torch import nn

from .errors import ConfigError, ContractError, DimensionError
from .kg import ComplexEmbeddingTable
from .numeric import as_tensor, init_module, sparsemax

log = logging.getLogger(__name__)

ROLE_FIELDS = {"object": "objects", "relationship": "relations", "attribute": "attributes"}


# ---------------------------------------------------------------------------
# visual mapping
# ---------------------------------------------------------------------------


def _kmeans_pp(X, k, rng):
    n = len(X)
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            i = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            i = int(rng.choice(rest))
        chosen.append(i)
        d2 = np.minimum(d2, ((X - X[i]) ** 2).sum(1))
    return X[chosen].copy()


def _lloyd(X, centers, max_iter):
    history = []
    assign = None
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        new_assign = d2.argmin(1)
        history.append(float(d2[np.arange(len(X)), new_assign].sum()))
        if assign is not None and np.array_equal(assign, new_assign):
            break
        assign = new_assign
        for c in range(len(centers)):
            members = X[assign == c]
            if len(members):
                centers[c] = members.mean(0)
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    assign = d2.argmin(1)
    history.append(float(d2[np.arange(len(X)), assign].sum()))
    return centers, assign, history


def cluster_regions(regions, k: int, seed: int = 0, n_init: int = 4, max_iter: int = 100, return_history=False):
    """k-means with k-means++ seeding; the best of ``n_init`` seeded runs."""
    X = np.asarray(regions, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise DimensionError("regions must be a non-empty (M, L_v) array")
    if not 1 <= k <= len(X):
        raise ConfigError(f"cluster count {k} outside [1, {len(X)}]")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers, _, history = _lloyd(X, _kmeans_pp(X, k, rng), max_iter)
        if best is None or history[-1] < best[1][-1]:
            best = (centers, history)
    return (best[0], best[1]) if return_history else best[0]


def pair_features(regions, pair_limit: int = 64, rng=None):
    """Mean of two regions for up to ``pair_limit`` unordered pairs."""
    X = np.asarray(regions, dtype=np.float64)
    if len(X) < 2:
        raise ContractError("relation features need at least two regions")
    pairs = list(itertools.combinations(range(len(X)), 2))
    if len(pairs) > pair_limit:
        rng = rng if rng is not None else np.random.default_rng(0)
        keep = np.sort(rng.choice(len(pairs), size=pair_limit, replace=False))
        pairs = [pairs[i] for i in keep]
    idx = np.array(pairs)
    return 0.5 * (X[idx[:, 0]] + X[idx[:, 1]])


def union_relation_features(regions, k: int, pair_limit: int = 64, seed: int = 0):
    rng = np.random.default_rng(seed)
    feats = pair_features(regions, pair_limit, rng)
    return cluster_regions(feats, min(k, len(feats)), seed=int(rng.integers(2**31)))


# ---------------------------------------------------------------------------
# knowledge mapping networks
# ---------------------------------------------------------------------------


class AttentionMapper(nn.Module):
    """K sparse attention operations pooling proposals into K vectors."""

    def __init__(self, in_dim: int, hidden: int = 64, heads: int = 3, role: str = "object"):
        super().__init__()
        if heads < 1:
            raise ConfigError("need at least one attention operation")
        self.role = role
        self.W1 = nn.Linear(in_dim, hidden)
        self.W2 = nn.Linear(hidden, heads, bias=False)

    @property
    def heads(self):
        return self.W2.out_features

    def attention(self, V):
        return sparsemax(self.W2(torch.tanh(self.W1(V))).T)

    def forward(self, V):
        A = self.attention(V)
        return A @ V, A


def attend_multi(V, mapper: AttentionMapper):
    V = as_tensor(V) if not torch.is_tensor(V) else V
    if V.ndim != 2 or V.shape[0] < 1:
        raise DimensionError("proposals must be a non-empty (N, L_v) array")
    Z, _ = mapper(V)
    return Z


class ClassifierHead(nn.Module):
    def __init__(self, in_dim: int, num_concepts: int):
        super().__init__()
        self.f = nn.Linear(in_dim, num_concepts)

    @property
    def num_concepts(self):
        return self.f.out_features

    def forward(self, x):
        return self.f(x)


def predict_multilabel(Z, head: ClassifierHead):
    return torch.sigmoid(head(Z).sum(0))


def diversity_penalty(Z):
    """-sum_{i != j} KL(softmax(z_i) || softmax(z_j)); always <= 0."""
    if Z.shape[0] < 2:
        log.warning("diversity penalty needs at least two attention rows; returning 0")
        return Z.sum() * 0.0
    logp = torch.log_softmax(Z, dim=-1)
    p = logp.exp()
    # kl[i, j] = sum_d p_i (log p_i - log p_j)
    kl = (p * logp).sum(-1, keepdim=True) - p @ logp.T
    return -(kl.sum() - kl.diagonal().sum())


def mapping_loss(probabilities, labels, Z=None, diversity_weight: float = 1.0):
    """Mean binary cross-entropy over classes plus the diversity penalty."""
    y = labels if torch.is_tensor(labels) else as_tensor(labels)
    if not torch.all((y == 0) | (y == 1)):
        raise ContractError("labels must be multi-hot (entries in {0, 1})")
    if y.shape != probabilities.shape:
        raise DimensionError(f"label shape {tuple(y.shape)} != probability shape {tuple(probabilities.shape)}")
    p = probabilities.clamp(1e-12, 1 - 1e-12)
    bce = -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()
    if Z is not None and diversity_weight:
        bce = bce + diversity_weight * diversity_penalty(Z)
    return bce


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------


@dataclass
class LabelSet:
    objects: np.ndarray
    relations: np.ndarray
    attributes: np.ndarray

    def for_role(self, role: str) -> np.ndarray:
        return getattr(self, ROLE_FIELDS[role])


def load_lexicon(path) -> dict[str, list[str]]:
    """``token<TAB>role`` lines grouped by role, in file order."""
    from .kg import load_roles

    lex: dict[str, list[str]] = {r: [] for r in ROLE_FIELDS}
    for token, role in load_roles(path).items():
        lex[role].append(token.lower())
    return lex


def labels_from_caption(caption, lexicons: dict[str, list[str]]) -> LabelSet:
    tokens = {t.lower() for t in caption}
    out = {}
    for role, name in ROLE_FIELDS.items():
        vocab = lexicons.get(role, [])
        out[name] = np.array([1.0 if w in tokens else 0.0 for w in vocab])
    return LabelSet(**out)


def scene_labels(captions, lexicons) -> LabelSet:
    """Union of the label sets of all reference captions."""
    sets = [labels_from_caption(c, lexicons) for c in captions]
    return LabelSet(*(np.maximum.reduce([getattr(s, f) for s in sets]) for f in ROLE_FIELDS.values()))


# ---------------------------------------------------------------------------
# inference-time soft assignment
# ---------------------------------------------------------------------------


def infer_concept_distribution(v, head: ClassifierHead):
    with torch.no_grad():
        return sparsemax(head(as_tensor(v))).numpy()


def knowledge_vector(p, table: ComplexEmbeddingTable, role_indices) -> np.ndarray:
    """Convex combination of the role's embedding columns, as [real; imag]."""
    role_indices = np.asarray(role_indices, dtype=np.int64)
    if role_indices.size == 0:
        raise ConfigError("role has no concepts in the embedding table")
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != role_indices.size:
        raise DimensionError(f"distribution length {p.shape[-1]} != role size {role_indices.size}")
    return np.concatenate([p @ table.real[role_indices], p @ table.imag[role_indices]], axis=-1)


@dataclass
class MappingNetwork:
    """Attention mapper and classifier head for one role."""

    role: str
    mapper: AttentionMapper
    head: ClassifierHead

    def parameters(self):
        return list(self.mapper.parameters()) + list(self.head.parameters())

    def named_parameters(self, prefix=""):
        for n, p in self.mapper.named_parameters():
            yield f"{prefix}{self.role}.mapper.{n}", p
        for n, p in self.head.named_parameters():
            yield f"{prefix}{self.role}.head.{n}", p


def make_mapping_networks(in_dim, role_sizes: dict[str, int], hidden=64, heads=3, rng=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    nets = {}
    for role in ROLE_FIELDS:
        net = MappingNetwork(role, AttentionMapper(in_dim, hidden, heads, role), ClassifierHead(in_dim, role_sizes[role]))
        init_module(net.mapper, rng)
        init_module(net.head, rng)
        nets[role] = net
    return nets


@dataclass
class CandidateProposalSet:
    scene_id: str
    obj_visual: np.ndarray
    rel_visual: np.ndarray
    att_visual: np.ndarray
    obj_knowledge: np.ndarray
    rel_knowledge: np.ndarray
    att_knowledge: np.ndarray
    obj_weights: np.ndarray
    rel_weights: np.ndarray
    att_weights: np.ndarray
    has_relations: bool = True

    @property
    def num_objects(self):
        return len(self.obj_visual)

    @property
    def num_relations(self):
        return len(self.rel_visual)

    def visual(self):
        """All proposals stacked as [objects; relations; attributes]."""
        return np.concatenate([self.obj_visual, self.rel_visual, self.att_visual])

    def knowledge(self):
        return np.concatenate([self.obj_knowledge, self.rel_knowledge, self.att_knowledge])

    def to_json(self) -> str:
        d = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "CandidateProposalSet":
        d = json.loads(line)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = np.asarray(v, dtype=np.float64)
        return cls(**d)


def _role_knowledge(V, net: MappingNetwork, table, role_indices):
    if len(V) == 0:
        return np.zeros((0, 2 * table.dim)), np.zeros((0, len(role_indices)))
    P = infer_concept_distribution(V, net.head)
    return knowledge_vector(P, table, role_indices), P


def build_proposal_set(
    scene_id: str,
    regions,
    networks: dict[str, MappingNetwork],
    table: ComplexEmbeddingTable,
    role_indices: dict[str, np.ndarray],
    k_range=(5, 10),
    pair_limit: int = 64,
    seed: int = 0,
) -> CandidateProposalSet:
    regions = np.asarray(regions, dtype=np.float64)
    rng = np.random.default_rng(seed)
    k_obj = min(int(rng.integers(k_range[0], k_range[1] + 1)), len(regions))
    k_rel = int(rng.integers(k_range[0], k_range[1] + 1))
    obj_v = cluster_regions(regions, k_obj, seed=int(rng.integers(2**31)))
    rel_seed = int(rng.integers(2**31))
    if len(regions) >= 2:
        rel_v, has_rel = union_relation_features(regions, k_rel, pair_limit, seed=rel_seed), True
    else:
        log.warning("scene %s has a single region; no relation proposals", scene_id)
        rel_v, has_rel = np.zeros((0, regions.shape[1])), False
    obj_k, obj_p = _role_knowledge(obj_v, networks["object"], table, role_indices["object"])
    rel_k, rel_p = _role_knowledge(rel_v, networks["relationship"], table, role_indices["relationship"])
    att_k, att_p = _role_knowledge(obj_v, networks["attribute"], table, role_indices["attribute"])
    return CandidateProposalSet(scene_id, obj_v, rel_v, obj_v.copy(), obj_k, rel_k, att_k, obj_p, rel_p, att_p, has_rel)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class MappingConfig:
    hidden: int = 64
    heads: int = 3
    epochs: int = 100
    learning_rate: float = 5e-3
    diversity_weight: float = 1.0
    k_min: int = 5
    k_max: int = 10
    pair_limit: int = 64
    seed: int = 0

    def validate(self):
        if self.heads < 1 or self.hidden < 1 or self.epochs < 1:
            raise ConfigError("mapping hidden, heads and epochs must be positive")
        if not 1 <= self.k_min <= self.k_max:
            raise ConfigError("cluster range must satisfy 1 <= k_min <= k_max")


@dataclass
class _ClusterCache:
    seed: int
    pair_limit: int
    store: dict = field(default_factory=dict)

    def get(self, key, regions, k, role):
        ck = (key, k, role)
        if ck not in self.store:
            seed = self.seed + 7919 * k + (0 if role == "object" else 104729)
            if role == "relationship":
                self.store[ck] = union_relation_features(regions, k, self.pair_limit, seed=seed)
            else:
                self.store[ck] = cluster_regions(regions, min(k, len(regions)), seed=seed)
        return self.store[ck]


def train_mapping_networks(
    region_sets: list[np.ndarray],
    labels: list[LabelSet],
    networks: dict[str, MappingNetwork],
    config: MappingConfig | None = None,
    history: dict | None = None,
):
    """Fit each role's mapper and head on (scene regions, caption labels).

    One cluster count per scene per epoch is drawn from the configured range;
    the relation network sees clustered pair features.
    """
    config = config or MappingConfig()
    config.validate()
    rng = np.random.default_rng(config.seed)
    cache = _ClusterCache(config.seed, config.pair_limit)
    for role, net in networks.items():
        opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
        losses = []
        for _ in range(config.epochs):
            total = 0.0
            opt.zero_grad()
            n_used = 0
            for i in rng.permutation(len(region_sets)):
                regions = region_sets[i]
                if role == "relationship" and len(regions) < 2:
                    continue
                k = int(rng.integers(config.k_min, config.k_max + 1))
                V = torch.from_numpy(cache.get(int(i), regions, k, role))
                Z, _ = net.mapper(V)
                probs = predict_multilabel(Z, net.head)
                loss = mapping_loss(probs, torch.from_numpy(labels[i].for_role(role)), Z, config.diversity_weight)
                loss.backward()
                total += loss.item()
                n_used += 1
            if n_used:
                for p in net.parameters():
                    if p.grad is not None:
                        p.grad /= n_used
                opt.step()
            losses.append(total / max(n_used, 1))
        if history is not None:
            history[role] = losses
    return networks


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean over classes (with at least one positive) of average precision."""
    scores, labels = np.asarray(scores), np.asarray(labels)
    aps = [average_precision_score(labels[:, c], scores[:, c]) for c in range(labels.shape[1]) if labels[:, c].any()]
    return float(np.mean(aps)) if aps else 0.0


def multilabel_scores(region_sets, net: MappingNetwork, k: int, seed: int = 0, pair_limit: int = 64):
    """Predicted probabilities per scene at a fixed cluster count."""
    cache = _ClusterCache(seed, pair_limit)
    out = []
    with torch.no_grad():
        for i, regions in enumerate(region_sets):
            V = torch.from_numpy(cache.get(i, regions, k, net.role))
            Z, _ = net.mapper(V)
            out.append(predict_multilabel(Z, net.head).numpy())
    return np.array(out)
