"""Knowledge-graph triple stores and complex-valued (ComplEx-style) embeddings."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, ContractError, DimensionError, LoadError, ParseError, RoleError
from .numeric import as_tensor

log = logging.getLogger(__name__)

ROLES = ("object", "relationship", "attribute")
EMBED_MAGIC = b"JRKG"
EMBED_VERSION = 1


@dataclass
class TripleStore:
    concepts: list[str]
    roles: list[str]
    triples: list[tuple[int, int, int]]
    duplicates: int = 0
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {c: i for i, c in enumerate(self.concepts)}
        self.validate()

    @property
    def size(self) -> int:
        return len(self.concepts)

    def role_indices(self, role: str) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.roles) if r == role], dtype=np.int64)

    def role_concepts(self, role: str) -> list[str]:
        return [self.concepts[i] for i in self.role_indices(role)]

    def validate(self) -> None:
        C = self.size
        seen = set()
        for h, r, t in self.triples:
            if not (0 <= h < C and 0 <= r < C and 0 <= t < C):
                raise ContractError(f"triple {(h, r, t)} indexes outside [0, {C})")
            if self.roles[r] != "relationship":
                raise RoleError(f"{self.concepts[r]!r} used as relation but tagged {self.roles[r]}")
            if self.roles[h] != "object":
                raise RoleError(f"{self.concepts[h]!r} used as head but tagged {self.roles[h]}")
            if self.roles[t] not in ("object", "attribute"):
                raise RoleError(f"{self.concepts[t]!r} used as tail but tagged {self.roles[t]}")
            if (h, r, t) in seen:
                raise ContractError(f"duplicate triple {(h, r, t)}")
            seen.add((h, r, t))


def load_roles(path) -> dict[str, str]:
    roles = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"expected 'concept<TAB>role', got {line!r}", lineno)
            name, role = parts[0].strip(), parts[1].strip()
            if role not in ROLES:
                raise ParseError(f"unknown role {role!r}", lineno)
            roles[name] = role
    return roles


def load_triples(path, roles_path) -> TripleStore:
    """Read ``head<TAB>relation<TAB>tail`` lines plus a concept-role file.

    The vocabulary follows first appearance in the triple file; concepts only
    present in the role file are appended in that file's order.
    """
    roles = load_roles(roles_path)
    concepts: list[str] = []
    index: dict[str, int] = {}
    triples: list[tuple[int, int, int]] = []
    seen = set()
    duplicates = 0

    def intern(name, lineno):
        if name not in roles:
            raise RoleError(f"line {lineno}: concept {name!r} has no role")
        if name not in index:
            index[name] = len(concepts)
            concepts.append(name)
        return index[name]

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise ParseError(f"expected 'head<TAB>relation<TAB>tail', got {line!r}", lineno)
            h, r, t = (p.strip() for p in parts)
            if roles.get(r) != "relationship" and r in roles:
                raise RoleError(f"line {lineno}: relation token {r!r} is tagged {roles[r]}")
            key = (intern(h, lineno), intern(r, lineno), intern(t, lineno))
            if key in seen:
                duplicates += 1
                continue
            seen.add(key)
            triples.append(key)
    for name in roles:
        if name not in index:
            index[name] = len(concepts)
            concepts.append(name)
    if duplicates:
        log.warning("dropped %d duplicate triple line(s) from %s", duplicates, path)
    return TripleStore(concepts, [roles[c] for c in concepts], triples, duplicates)


def write_store(store: TripleStore, triples_path, roles_path) -> None:
    with open(roles_path, "w", encoding="utf-8") as fh:
        for c, r in zip(store.concepts, store.roles):
            fh.write(f"{c}\t{r}\n")
    with open(triples_path, "w", encoding="utf-8") as fh:
        for h, r, t in store.triples:
            fh.write(f"{store.concepts[h]}\t{store.concepts[r]}\t{store.concepts[t]}\n")


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def _check_lengths(*vecs):
    shapes = {v.shape[-1] for v in vecs}
    if len(shapes) != 1:
        raise DimensionError(f"embedding lengths differ: {sorted(shapes)}")


def trilinear_expanded(h_re, h_im, r_re, r_im, t_re, t_im):
    """Four-term real expansion of Re(<h, r, conj(t)>), summed over the last axis.

    Works on numpy arrays and torch tensors alike (and is differentiable for
    the latter). Grouping the head-tail products first keeps the score
    bitwise symmetric under a head/tail swap when the relation is real.
    """
    _check_lengths(h_re, h_im, r_re, r_im, t_re, t_im)
    return (r_re * (h_re * t_re + h_im * t_im)).sum(-1) + (r_im * (h_re * t_im - h_im * t_re)).sum(-1)


def complex_trilinear_score(h, r, t):
    """Re(sum_d r_d * (h_d * conj(t_d))) using native complex arithmetic.

    Each argument is either a complex array or a ``(real, imag)`` pair.
    """
    h, r, t = (_to_complex(x) for x in (h, r, t))
    _check_lengths(h, r, t)
    return np.real(np.sum(r * (h * np.conj(t)), axis=-1))


def _to_complex(x):
    if isinstance(x, tuple):
        re, im = (np.asarray(v, dtype=np.float64) for v in x)
        return re + 1j * im
    return np.asarray(x, dtype=np.complex128)


# ---------------------------------------------------------------------------
# embedding table
# ---------------------------------------------------------------------------


@dataclass
class ComplexEmbeddingTable:
    real: np.ndarray
    imag: np.ndarray

    def __post_init__(self):
        self.real = np.ascontiguousarray(self.real, dtype=np.float64)
        self.imag = np.ascontiguousarray(self.imag, dtype=np.float64)
        if self.real.shape != self.imag.shape or self.real.ndim != 2:
            raise DimensionError("real and imag parts must share a (C, L_k) shape")
        if not (np.isfinite(self.real).all() and np.isfinite(self.imag).all()):
            raise ContractError("embedding table has non-finite entries")

    @property
    def num_concepts(self) -> int:
        return self.real.shape[0]

    @property
    def dim(self) -> int:
        return self.real.shape[1]

    def score(self, h, r, t):
        return trilinear_expanded(self.real[h], self.imag[h], self.real[r], self.imag[r], self.real[t], self.imag[t])

    def save(self, path) -> None:
        C, L = self.real.shape
        header = EMBED_MAGIC + struct.pack("<III", EMBED_VERSION, C, L)
        body = self.real.astype("<f8").tobytes() + self.imag.astype("<f8").tobytes()
        _atomic_write(path, header + body)

    @classmethod
    def load(cls, path) -> "ComplexEmbeddingTable":
        data = Path(path).read_bytes()
        if len(data) < 16 or data[:4] != EMBED_MAGIC:
            raise LoadError(f"{path}: not an embedding file")
        version, C, L = struct.unpack("<III", data[4:16])
        if version != EMBED_VERSION:
            raise LoadError(f"{path}: unsupported version {version}")
        n = C * L
        if len(data) != 16 + 16 * n:
            raise LoadError(f"{path}: truncated or oversized payload")
        arr = np.frombuffer(data, dtype="<f8", offset=16).astype(np.float64)
        return cls(arr[:n].reshape(C, L), arr[n:].reshape(C, L))


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class KGConfig:
    dim: int = 16
    epochs: int = 300
    learning_rate: float = 0.05
    negatives: int = 4
    l2_weight: float = 1e-3
    batch_size: int = 0
    seed: int = 0

    def validate(self):
        for name in ("dim", "epochs", "negatives"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"kg {name} must be positive")
        if self.learning_rate <= 0 or self.l2_weight < 0:
            raise ConfigError("kg learning rate must be positive and l2 weight non-negative")


def kg_objective(real: torch.Tensor, imag: torch.Tensor, pos: torch.Tensor, neg: torch.Tensor, l2_weight: float):
    """Mean logistic loss over positives (y=+1) and negatives (y=-1) plus L2.

    ``pos`` and ``neg`` are int64 ``(n, 3)`` index arrays.
    """
    idx = torch.cat([pos, neg])
    y = torch.cat([torch.ones(len(pos)), -torch.ones(len(neg))])
    h, r, t = idx[:, 0], idx[:, 1], idx[:, 2]
    s = trilinear_expanded(real[h], imag[h], real[r], imag[r], real[t], imag[t])
    loss = torch.nn.functional.softplus(-y * s).mean()
    return loss + l2_weight * (real.pow(2).sum() + imag.pow(2).sum()) / real.shape[0]


def corrupt(store: TripleStore, triples: np.ndarray, negatives: int, rng: np.random.Generator) -> np.ndarray:
    """Role-compatible head/tail corruptions; relations are never corrupted.

    The replacement always differs from the entity it replaces when the
    role has more than one concept.
    """
    pools = {role: store.role_indices(role) for role in ROLES}
    roles = np.array(store.roles)
    out = np.repeat(triples, negatives, axis=0)
    which = rng.integers(0, 2, size=len(out))  # 0 head, 1 tail
    draws = rng.random(len(out))
    for i in range(len(out)):
        col = 0 if which[i] == 0 else 2
        pool = pools[roles[out[i, col]]]
        if len(pool) < 2:
            continue
        j = int(draws[i] * (len(pool) - 1))
        if pool[j] >= out[i, col]:
            j += 1
        out[i, col] = pool[j]
    return out


def train_kg_embeddings(store: TripleStore, config: KGConfig | None = None, history: list | None = None):
    """Fit a complex embedding table to ``store`` with Adam on the logistic loss."""
    config = config or KGConfig()
    config.validate()
    if not store.triples:
        raise ConfigError("triple store is empty")
    if len(store.role_indices("relationship")) == 0:
        raise ConfigError("triple store has no relationship concepts")
    rng = np.random.default_rng(config.seed)
    C, L = store.size, config.dim
    scale = 1.0 / np.sqrt(L)
    real = torch.tensor(rng.normal(0.0, scale, size=(C, L)), requires_grad=True)
    imag = torch.tensor(rng.normal(0.0, scale, size=(C, L)), requires_grad=True)
    opt = torch.optim.Adam([real, imag], lr=config.learning_rate)
    pos_all = np.array(store.triples, dtype=np.int64)
    bs = config.batch_size if config.batch_size > 0 else len(pos_all)
    for _ in range(config.epochs):
        order = rng.permutation(len(pos_all))
        total, count = 0.0, 0
        for start in range(0, len(order), bs):
            pos = pos_all[order[start:start + bs]]
            neg = corrupt(store, pos, config.negatives, rng)
            opt.zero_grad()
            loss = kg_objective(real, imag, torch.from_numpy(pos), torch.from_numpy(neg), config.l2_weight)
            loss.backward()
            opt.step()
            total += loss.item() * len(pos)
            count += len(pos)
        if history is not None:
            history.append(total / count)
    return ComplexEmbeddingTable(real.detach().numpy().copy(), imag.detach().numpy().copy())


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _rank(scores: np.ndarray, true_pos: int, exclude: np.ndarray) -> int:
    s_true = scores[true_pos]
    mask = np.ones(len(scores), dtype=bool)
    mask[exclude] = False
    mask[true_pos] = False
    higher = np.count_nonzero(scores[mask] > s_true)
    ties = np.count_nonzero(scores[mask] == s_true)
    return 1 + higher + ties


def evaluate_link_prediction(table: ComplexEmbeddingTable, store: TripleStore, heldout) -> dict[str, float]:
    """Filtered ranking metrics for head and tail prediction.

    Ties with corruptions count against the true triple.
    """
    heldout = [tuple(map(int, x)) for x in heldout]
    if not heldout:
        raise ContractError("held-out triple list is empty")
    known = set(store.triples) | set(heldout)
    pools = {role: store.role_indices(role) for role in ROLES}
    E_re, E_im = table.real, table.imag
    ranks = []
    for h, r, t in heldout:
        cand = pools[store.roles[t]]
        s = trilinear_expanded(E_re[h], E_im[h], E_re[r], E_im[r], E_re[cand], E_im[cand])
        pos = int(np.flatnonzero(cand == t)[0])
        excl = np.array([i for i, c in enumerate(cand) if c != t and (h, r, int(c)) in known], dtype=np.int64)
        ranks.append(_rank(s, pos, excl))

        cand = pools[store.roles[h]]
        s = trilinear_expanded(E_re[cand], E_im[cand], E_re[r], E_im[r], E_re[t], E_im[t])
        pos = int(np.flatnonzero(cand == h)[0])
        excl = np.array([i for i, c in enumerate(cand) if c != h and (int(c), r, t) in known], dtype=np.int64)
        ranks.append(_rank(s, pos, excl))
    ranks = np.array(ranks, dtype=np.float64)
    return {
        "MRR": float(np.mean(1.0 / ranks)),
        "hits@1": float(np.mean(ranks <= 1)),
        "hits@3": float(np.mean(ranks <= 3)),
        "hits@10": float(np.mean(ranks <= 10)),
    }


# ---------------------------------------------------------------------------
# toy knowledge graphs
# ---------------------------------------------------------------------------


def rule_kg(n_entities: int = 20, n_relations: int = 5, n_groups: int = 4, heldout_frac: float = 0.1, seed: int = 0):
    """A closed rule-generated KG and a held-out split.

    Entities fall into ``n_groups`` equal groups; relation ``j`` links every
    member of group ``g`` to every member of group ``(g + j + 1) % n_groups``
    for two source groups per relation. Returns ``(store, heldout)``; the
    store's triples exclude the held-out ones.
    """
    rng = np.random.default_rng(seed)
    ents = [f"e{i}" for i in range(n_entities)]
    rels = [f"r{j}" for j in range(n_relations)]
    group = np.arange(n_entities) % n_groups
    triples = []
    for j in range(n_relations):
        sources = rng.choice(n_groups, size=min(2, n_groups), replace=False)
        for g in sorted(sources):
            tg = (g + j + 1) % n_groups
            for h in np.flatnonzero(group == g):
                for t in np.flatnonzero(group == tg):
                    if h != t:
                        triples.append((int(h), n_entities + j, int(t)))
    order = rng.permutation(len(triples))
    n_held = max(1, int(round(heldout_frac * len(triples))))
    held = [triples[i] for i in sorted(order[:n_held])]
    train = [triples[i] for i in sorted(order[n_held:])]
    store = TripleStore(ents + rels, ["object"] * n_entities + ["relationship"] * n_relations, train)
    return store, held
