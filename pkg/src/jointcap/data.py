"""Scene records: JSON-lines ingestion/export and a toy dataset synthesiser."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestError
from .kg import TripleStore, write_store

SPLITS = ("train", "val", "test")


@dataclass
class SceneRecord:
    scene_id: str
    regions: np.ndarray
    global_feat: np.ndarray
    captions: list[list[str]]
    latent: dict | None = None

    def __post_init__(self):
        self.regions = np.asarray(self.regions, dtype=np.float64)
        self.global_feat = np.asarray(self.global_feat, dtype=np.float64)
        if self.regions.ndim != 2 or len(self.regions) < 1:
            raise IngestError(f"scene {self.scene_id}: regions must be a non-empty (M, L_v) array")
        if not (np.isfinite(self.regions).all() and np.isfinite(self.global_feat).all()):
            raise IngestError(f"scene {self.scene_id}: non-finite features")
        if not self.captions or any(len(c) == 0 for c in self.captions):
            raise IngestError(f"scene {self.scene_id}: every caption must be non-empty")

    def to_json(self) -> str:
        d = {
            "scene_id": self.scene_id,
            "regions": self.regions.tolist(),
            "global": self.global_feat.tolist(),
            "captions": self.captions,
        }
        if self.latent is not None:
            d["latent"] = self.latent
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(d["scene_id"], d["regions"], d["global"], [list(c) for c in d["captions"]], d.get("latent"))


@dataclass
class Dataset:
    records: dict[str, SceneRecord]
    splits: dict[str, list[str]] = field(default_factory=dict)

    def split(self, name) -> list[SceneRecord]:
        return [self.records[i] for i in self.splits.get(name, [])]

    def __len__(self):
        return len(self.records)


def ingest_scenes(path, split_path=None) -> Dataset:
    """Read scenes (JSON-lines) and an optional split file, validating dimensions."""
    records: dict[str, SceneRecord] = {}
    dims = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = SceneRecord.from_dict(json.loads(line))
            except (KeyError, TypeError, ValueError) as exc:
                if isinstance(exc, IngestError):
                    raise
                raise IngestError(f"line {lineno}: malformed scene record ({exc})") from exc
            d = (rec.regions.shape[1], rec.global_feat.shape[0])
            if dims is None:
                dims = d
            elif d != dims:
                raise IngestError(f"scene {rec.scene_id}: feature dims {d} differ from corpus dims {dims}")
            if rec.scene_id in records:
                raise IngestError(f"duplicate scene id {rec.scene_id}")
            records[rec.scene_id] = rec
    splits: dict[str, list[str]] = {}
    if split_path is not None:
        splits = json.loads(Path(split_path).read_text(encoding="utf-8"))
        listed = set()
        for name, ids in splits.items():
            for sid in ids:
                if sid not in records:
                    raise IngestError(f"split {name!r} lists unknown scene {sid}")
                listed.add(sid)
        missing = [sid for sid in records if sid not in listed]
        if missing:
            raise IngestError(f"scene {missing[0]} has no split entry")
    else:
        splits = {"train": list(records)}
    return Dataset(records, splits)


def export_scenes(dataset: Dataset, path, split_path=None) -> None:
    _atomic_text(path, "".join(r.to_json() + "\n" for r in dataset.records.values()))
    if split_path is not None:
        _atomic_text(split_path, json.dumps(dataset.splits, indent=1, sort_keys=True) + "\n")


def _atomic_text(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

OBJECT_WORDS = [
    "man", "woman", "dog", "horse", "cat", "boy", "girl", "car", "ball", "table",
    "chair", "bike", "tree", "bird", "cup", "kite", "boat", "train", "bench", "hat",
]
RELATION_WORDS = ["riding", "holding", "near", "on", "behind", "watching", "under", "beside", "chasing", "with"]
ATTRIBUTE_WORDS = ["red", "small", "big", "white", "black", "young", "old", "green", "wooden", "furry"]
ATTRIBUTE_RELATION = "has"


@dataclass
class SynthSpec:
    scenes: int = 50
    ontology_size: int = 8
    feature_dim: int = 32
    noise: float = 0.1
    graph_size: int = 1
    regions_per_concept: int = 2
    seed: int = 0

    def validate(self):
        if self.scenes < 1 or self.feature_dim < 1 or self.regions_per_concept < 1 or self.noise < 0:
            raise ConfigError("synthesis sizes must be positive and noise non-negative")
        if self.ontology_size > len(OBJECT_WORDS):
            raise ConfigError(f"ontology size above {len(OBJECT_WORDS)} is not supported")
        if self.ontology_size < self.graph_size + 1:
            raise ConfigError(
                f"ontology of {self.ontology_size} objects is too small for {self.graph_size} triplet(s) per scene"
            )


def synth_ontology(spec: SynthSpec, rng):
    n_obj = spec.ontology_size
    n_rel = min(len(RELATION_WORDS), max(2, n_obj // 2))
    n_att = min(len(ATTRIBUTE_WORDS), max(2, n_obj // 2))
    objects, relations, attributes = OBJECT_WORDS[:n_obj], RELATION_WORDS[:n_rel], ATTRIBUTE_WORDS[:n_att]
    concepts = objects + relations + [ATTRIBUTE_RELATION] + attributes
    roles = ["object"] * n_obj + ["relationship"] * (n_rel + 1) + ["attribute"] * n_att
    idx = {c: i for i, c in enumerate(concepts)}
    triples = []
    for r in relations:
        heads = rng.choice(n_obj, size=max(2, n_obj // 2), replace=False)
        tails = rng.choice(n_obj, size=max(2, n_obj // 2), replace=False)
        for h in sorted(heads):
            for t in sorted(tails):
                if h != t:
                    triples.append((idx[objects[h]], idx[r], idx[objects[t]]))
    for o in objects:
        for a in rng.choice(n_att, size=min(2, n_att), replace=False):
            triples.append((idx[o], idx[ATTRIBUTE_RELATION], idx[attributes[a]]))
    return TripleStore(concepts, roles, triples)


def caption_for(latent) -> list[str]:
    """Template realisation: ``a [attr] head rel a [attr] tail``, joined by ``and``."""
    words = []
    for k, (h, r, t) in enumerate(latent["triples"]):
        if k:
            words.append("and")
        for ent, rel in ((h, r), (t, None)):
            words.append("a")
            if ent in latent["attributes"]:
                words.append(latent["attributes"][ent])
            words.append(ent)
            if rel is not None:
                words.append(rel)
    return words


def latent_concepts(latent) -> dict[str, set]:
    objs, rels = set(), set()
    for h, r, t in latent["triples"]:
        objs.update((h, t))
        rels.add(r)
    return {"object": objs, "relationship": rels, "attribute": set(latent["attributes"].values())}


def synth_dataset(spec: SynthSpec, out_dir) -> dict[str, Path]:
    """Write a toy corpus to ``out_dir``.

    Produces ``concepts.tsv``, ``triples.tsv``, ``lexicon.tsv``,
    ``scenes.jsonl`` and ``splits.json``. Region features are concept
    prototypes plus Gaussian noise; captions realise each scene's latent graph.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store = synth_ontology(spec, rng)
    protos = {c: rng.normal(size=spec.feature_dim) for c in store.concepts}
    obj_triples = [t for t in store.triples if store.concepts[t[1]] != ATTRIBUTE_RELATION]
    allowed_attrs: dict[str, list[str]] = {}
    for h, r, t in store.triples:
        if store.concepts[r] == ATTRIBUTE_RELATION:
            allowed_attrs.setdefault(store.concepts[h], []).append(store.concepts[t])

    records = {}
    for n in range(spec.scenes):
        picks = rng.choice(len(obj_triples), size=spec.graph_size, replace=False)
        triples = [[store.concepts[i] for i in obj_triples[p]] for p in sorted(picks)]
        attributes = {}
        for h, _, t in triples:
            for ent in (h, t):
                if ent not in attributes and rng.random() < 0.5:
                    choices = allowed_attrs[ent]
                    attributes[ent] = choices[int(rng.integers(len(choices)))]
        latent = {"triples": triples, "attributes": attributes}
        concepts = sorted(set().union(*latent_concepts(latent).values()))
        regions = []
        for c in concepts:
            for _ in range(spec.regions_per_concept):
                regions.append(protos[c] + spec.noise * rng.normal(size=spec.feature_dim))
        regions = np.array(regions)
        global_feat = regions.mean(0)
        sid = f"scene{n:04d}"
        records[sid] = SceneRecord(sid, regions, global_feat, [caption_for(latent)], latent)

    ids = list(records)
    n_val = max(1, spec.scenes // 10) if spec.scenes >= 3 else 0
    n_test = n_val
    splits = {"train": ids[: len(ids) - n_val - n_test], "val": ids[len(ids) - n_val - n_test: len(ids) - n_test],
              "test": ids[len(ids) - n_test:]}
    ds = Dataset(records, splits)
    paths = {
        "concepts": out / "concepts.tsv",
        "triples": out / "triples.tsv",
        "lexicon": out / "lexicon.tsv",
        "scenes": out / "scenes.jsonl",
        "splits": out / "splits.json",
    }
    write_store(store, paths["triples"], paths["concepts"])
    _atomic_text(paths["lexicon"], "".join(f"{c}\t{r}\n" for c, r in zip(store.concepts, store.roles)))
    export_scenes(ds, paths["scenes"], paths["splits"])
    return paths
