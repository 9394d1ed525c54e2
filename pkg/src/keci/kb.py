"""Local mini knowledge base: alias-based candidate generation and
background knowledge-graph construction.

The KB file is JSON::

    {"semantic_types": [str], "kb_relations": [str],
     "entities": [{"id": str, "aliases": [str], "definition": str,
                   "semantic_types": [str], "embedding": [float]}],
     "entity_edges": [[head_id, rel, tail_id]],
     "type_edges": [[head_type, rel, tail_type]]}

Candidate generation matches a span against entity aliases after
lowercasing and stripping punctuation; there is no fuzzy matching and no
cap on the number of candidates per span.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Document, Span, normalize_surface
from .errors import FormatError, ValidationError

ENTITY_NODE = "ENTITY"
TYPE_NODE = "TYPE"

# Reserved relations linking entity nodes with their semantic-type nodes.
# The inverse lets type information flow back into entity nodes under an
# in-neighbor aggregation scheme.
HAS_TYPE = "HAS_TYPE"
TYPE_OF = "TYPE_OF"


@dataclass
class KBEntity:
    id: str
    aliases: list[str]
    definition: str
    semantic_types: list[str]
    embedding: np.ndarray


@dataclass
class KnowledgeBase:
    entities: list[KBEntity]
    semantic_types: list[str]
    kb_relations: list[str]
    entity_edges: list[tuple[str, str, str]]  # (head_id, relation, tail_id)
    type_edges: list[tuple[str, str, str]]
    _alias_index: dict[str, list[int]] = field(default_factory=dict, repr=False)
    _id_index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._id_index = {}
        for i, ent in enumerate(self.entities):
            if ent.id in self._id_index:
                raise ValidationError(f"duplicate KB entity id {ent.id!r}")
            self._id_index[ent.id] = i
        self._alias_index = {}
        for i, ent in enumerate(self.entities):
            for alias in ent.aliases:
                self._alias_index.setdefault(normalize_surface(alias), []).append(i)
        for key in self._alias_index:
            self._alias_index[key].sort(key=lambda i: self.entities[i].id)

    @property
    def embedding_dim(self) -> int:
        return int(self.entities[0].embedding.shape[0]) if self.entities else 0

    def entity_by_id(self, entity_id: str) -> KBEntity:
        return self.entities[self._id_index[entity_id]]

    def candidates_for_surface(self, surface: str) -> list[int]:
        return list(self._alias_index.get(normalize_surface(surface), []))

    @property
    def relation_vocabulary(self) -> list[str]:
        """KB relations plus the reserved HAS_TYPE/TYPE_OF pair."""
        return [*self.kb_relations, HAS_TYPE, TYPE_OF]

    @classmethod
    def empty(cls) -> "KnowledgeBase":
        return cls(entities=[], semantic_types=[], kb_relations=[], entity_edges=[], type_edges=[])

    def to_json_obj(self) -> dict:
        return {
            "semantic_types": self.semantic_types,
            "kb_relations": self.kb_relations,
            "entities": [
                {
                    "id": e.id,
                    "aliases": e.aliases,
                    "definition": e.definition,
                    "semantic_types": e.semantic_types,
                    "embedding": [float(x) for x in e.embedding],
                }
                for e in self.entities
            ],
            "entity_edges": [list(edge) for edge in self.entity_edges],
            "type_edges": [list(edge) for edge in self.type_edges],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_obj(), indent=2, sort_keys=True) + "\n")


def load_kb(path) -> KnowledgeBase:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"KB file {path}: {e}") from e
    return kb_from_json_obj(raw)


def kb_from_json_obj(raw: dict) -> KnowledgeBase:
    semantic_types = list(raw.get("semantic_types", []))
    kb_relations = list(raw.get("kb_relations", []))
    for reserved in (HAS_TYPE, TYPE_OF):
        if reserved in kb_relations:
            raise ValidationError(f"KB relation name {reserved!r} is reserved")
    if len(set(semantic_types)) != len(semantic_types):
        raise ValidationError("duplicate semantic type names")

    entities = []
    dim = None
    for obj in raw.get("entities", []):
        ent = KBEntity(
            id=str(obj["id"]),
            aliases=[str(a) for a in obj.get("aliases", [])],
            definition=str(obj.get("definition", "")),
            semantic_types=[str(t) for t in obj.get("semantic_types", [])],
            embedding=np.asarray(obj.get("embedding", []), dtype=np.float64),
        )
        if not ent.aliases:
            raise ValidationError(f"KB entity {ent.id!r} has no aliases")
        if not ent.semantic_types:
            raise ValidationError(f"KB entity {ent.id!r} has no semantic types")
        for t in ent.semantic_types:
            if t not in semantic_types:
                raise ValidationError(f"KB entity {ent.id!r} references unknown semantic type {t!r}")
        if dim is None:
            dim = ent.embedding.shape[0]
        elif ent.embedding.shape[0] != dim:
            raise ValidationError(f"KB entity {ent.id!r} embedding dim {ent.embedding.shape[0]} != {dim}")
        entities.append(ent)

    ids = {e.id for e in entities}
    entity_edges = []
    for head, rel, tail in raw.get("entity_edges", []):
        if head not in ids or tail not in ids:
            raise ValidationError(f"entity edge ({head!r}, {rel!r}, {tail!r}) has a dangling endpoint")
        if rel not in kb_relations:
            raise ValidationError(f"entity edge uses unknown relation {rel!r}")
        entity_edges.append((head, rel, tail))
    type_edges = []
    for head, rel, tail in raw.get("type_edges", []):
        if head not in semantic_types or tail not in semantic_types:
            raise ValidationError(f"type edge ({head!r}, {rel!r}, {tail!r}) has a dangling endpoint")
        if rel not in kb_relations:
            raise ValidationError(f"type edge uses unknown relation {rel!r}")
        type_edges.append((head, rel, tail))

    return KnowledgeBase(entities, semantic_types, kb_relations, entity_edges, type_edges)


@dataclass
class KGNode:
    kind: str  # ENTITY_NODE or TYPE_NODE
    ref: str  # entity id or semantic type name


@dataclass
class KnowledgeGraph:
    """Per-document subgraph over candidate entities and their semantic types."""

    nodes: list[KGNode]
    edges: list[tuple[int, int, int]]  # (src_node, relation_index, dst_node)
    candidate_map: dict[int, list[int]]  # span index -> entity-node indices
    relation_names: list[str]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def entity_node_indices(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind == ENTITY_NODE]

    def type_node_indices(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind == TYPE_NODE]


def link_candidates(doc: Document, spans: list[Span], kb: KnowledgeBase) -> dict[int, list[int]]:
    """Map span index -> KB entity indices whose normalized alias equals the
    span's normalized surface text. Spans may have 0, 1, or many candidates."""
    out: dict[int, list[int]] = {}
    for i, span in enumerate(spans):
        cands = kb.candidates_for_surface(doc.span_text(span))
        if cands:
            out[i] = cands
    return out


def build_kg(candidate_map: dict[int, list[int]], kb: KnowledgeBase) -> KnowledgeGraph:
    """Deterministic graph over the union of candidates: entity nodes sorted
    by id, then type nodes sorted by name; KB edges kept only when both
    endpoints are included."""
    entity_idx = sorted({e for cands in candidate_map.values() for e in cands}, key=lambda i: kb.entities[i].id)
    type_names = sorted({t for i in entity_idx for t in kb.entities[i].semantic_types})

    nodes = [KGNode(ENTITY_NODE, kb.entities[i].id) for i in entity_idx]
    nodes += [KGNode(TYPE_NODE, t) for t in type_names]
    node_of_entity = {kb.entities[i].id: pos for pos, i in enumerate(entity_idx)}
    node_of_type = {t: len(entity_idx) + pos for pos, t in enumerate(type_names)}

    relations = kb.relation_vocabulary
    rel_index = {r: k for k, r in enumerate(relations)}

    edges: list[tuple[int, int, int]] = []
    for i in entity_idx:
        ent = kb.entities[i]
        for t in ent.semantic_types:
            edges.append((node_of_entity[ent.id], rel_index[HAS_TYPE], node_of_type[t]))
            edges.append((node_of_type[t], rel_index[TYPE_OF], node_of_entity[ent.id]))
    for head, rel, tail in kb.entity_edges:
        if head in node_of_entity and tail in node_of_entity:
            edges.append((node_of_entity[head], rel_index[rel], node_of_entity[tail]))
    for head, rel, tail in kb.type_edges:
        if head in node_of_type and tail in node_of_type:
            edges.append((node_of_type[head], rel_index[rel], node_of_type[tail]))

    remapped = {
        span_i: [node_of_entity[kb.entities[e].id] for e in cands]
        for span_i, cands in sorted(candidate_map.items())
    }
    return KnowledgeGraph(nodes=nodes, edges=edges, candidate_map=remapped, relation_names=relations)
