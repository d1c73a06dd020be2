"""DOT rendering of semantic graphs."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .graph import SemanticGraph
from .mapping import CandidateProposalSet


def vertex_names(proposals: CandidateProposalSet, role_concepts: dict[str, list[str]]) -> dict[str, list[str]]:
    """Top concept of each proposal from its stored soft-assignment weights."""
    out = {}
    for role, weights in (("object", proposals.obj_weights), ("relationship", proposals.rel_weights),
                          ("attribute", proposals.att_weights)):
        names = role_concepts[role]
        out[role] = [names[int(np.argmax(w))] for w in weights] if len(weights) else []
    return out


def _quote(s):
    return '"' + str(s).replace("\\", "\\\\").replace('"', '\\"') + '"'


def graph_to_dot(graph: SemanticGraph, names: dict[str, list[str]], name="semantic_graph") -> str:
    """Vertices in triplets become nodes; each triplet renders head -> relation -> tail."""
    nodes = {}
    edges = []
    for trip in graph.triplets:
        h = ("object", trip.head)
        r = ("relationship", trip.relation)
        t = (trip.tail_role, trip.tail)
        for v in (h, r, t):
            nodes.setdefault(v, f"{v[0][:3]}{v[1]}")
        rel_name = names["relationship"][trip.relation]
        edges.append((nodes[h], nodes[r], f"{rel_name} {trip.score:.4f}"))
        edges.append((nodes[r], nodes[t], rel_name))
    lines = [f"digraph {name} {{"]
    for v in sorted(nodes, key=lambda v: (v[0], v[1])):
        lines.append(f"  {nodes[v]} [label={_quote(f'{names[v[0]][v[1]]} ({v[0]})')}];")
    for a, b, label in edges:
        lines.append(f"  {a} -> {b} [label={_quote(label)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_graph(graph: SemanticGraph, names, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(graph_to_dot(graph, names), encoding="utf-8")
    tmp.replace(path)
    return path
