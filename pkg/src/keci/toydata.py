"""Synthetic corpus + mini-KB generator for experiments and tests.

Sentences follow the template "<MENTION> <predicate> <MENTION> ." with two
single-token mentions. Unambiguous mentions reuse surface forms from a
shared pool, so their types are learnable from the token alone. Ambiguous
mentions get a fresh one-off surface form plus KB entries: one relevant
candidate whose semantic type mirrors the gold entity type, and a
configurable number of distractor candidates of unrelated semantic types.
With a vocabulary frequency cutoff of 2, every ambiguous surface form maps
to UNK, so its type is decidable only from the KB candidates.

Relations are decidable from the mention type pair (one relation type per
ordered type pair rule); a slice of sentences pairs types outside the
rules to supply no-relation supervision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Document, TaskSchema, document_from_parts
from .kb import KBEntity, KnowledgeBase

DISTRACTOR_TYPES = ("NOISE_ALPHA", "NOISE_BETA")
KB_RELATION = "RELATED_TO"


def relevant_type_for(entity_type: str) -> str:
    """Semantic type planted in the KB for mentions of a gold entity type."""
    return f"KIND_{entity_type}"


@dataclass
class ToySpec:
    """Shape of a generated corpus; validated on construction."""

    entity_types: list[str]
    relation_rules: list[tuple[str, str, str]]  # (head type, relation, tail type)
    sentences: int = 32
    dev_sentences: int = 0
    vocab_size: int = 16  # surface pool for unambiguous mentions
    ambiguity_rate: float = 0.0
    distractors_per_mention: int = 2
    no_relation_rate: float = 0.25
    kb_embedding_dim: int = 16

    def __post_init__(self):
        if not self.entity_types:
            raise ValueError("toy spec needs at least one entity type")
        if len(set(self.entity_types)) != len(self.entity_types):
            raise ValueError("duplicate entity types in toy spec")
        for head, rel, tail in self.relation_rules:
            if head not in self.entity_types or tail not in self.entity_types:
                raise ValueError(f"relation rule ({head}, {rel}, {tail}) references unknown entity types")
        if not (0.0 <= self.ambiguity_rate <= 1.0) or not (0.0 <= self.no_relation_rate <= 1.0):
            raise ValueError("rates must lie in [0, 1]")
        if self.sentences < 1 or self.dev_sentences < 0:
            raise ValueError("sentence counts must be positive")
        if self.vocab_size < len(self.entity_types):
            raise ValueError("vocab_size must cover every entity type at least once")

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ToySpec":
        obj = dict(obj)
        if "relation_rules" in obj:
            obj["relation_rules"] = [tuple(rule) for rule in obj["relation_rules"]]
        return cls(**obj)


@dataclass
class _KbBuilder:
    dim: int
    rng: np.random.Generator
    entities: list[KBEntity] = field(default_factory=list)
    entity_edges: list[tuple[str, str, str]] = field(default_factory=list)
    semantic_types: list[str] = field(default_factory=list)

    def _next_id(self) -> str:
        return f"C{len(self.entities) + 1:07d}"

    def add_entity(self, alias: str, semantic_type: str) -> str:
        eid = self._next_id()
        self.entities.append(
            KBEntity(
                id=eid,
                aliases=[alias],
                definition=f"registry entry {alias}",
                semantic_types=[semantic_type],
                embedding=self.rng.normal(0.0, 1.0, size=self.dim).round(6),
            )
        )
        return eid


def generate_toy(spec: ToySpec, seed: int) -> tuple[list[Document], list[Document], KnowledgeBase, TaskSchema]:
    """Deterministic (train docs, dev docs, KB, schema) for a toy spec."""
    rng = np.random.default_rng(seed)
    types = list(spec.entity_types)
    relation_names = sorted({rel for _, rel, _ in spec.relation_rules})
    schema = TaskSchema.from_names(types, relation_names or ["REL"])

    # shared pool of unambiguous surface forms, types assigned round-robin
    pool = {t: [] for t in types}
    for i in range(spec.vocab_size):
        t = types[i % len(types)]
        pool[t].append(f"ent{i}{t[:2].lower()}")

    predicates = {rel: f"verb{rel.lower()}" for rel in relation_names}
    rule_pairs = {(h, t): rel for h, rel, t in spec.relation_rules}
    non_rule_pairs = [(a, b) for a in types for b in types if (a, b) not in rule_pairs]

    semantic_types = sorted({relevant_type_for(t) for t in types} | set(DISTRACTOR_TYPES))
    builder = _KbBuilder(dim=spec.kb_embedding_dim, rng=rng)
    builder.semantic_types = semantic_types
    fresh_counter = 0

    def make_mention(entity_type: str) -> tuple[str, str | None]:
        """Returns (surface form, relevant KB entity id or None)."""
        nonlocal fresh_counter
        if rng.random() < spec.ambiguity_rate:
            fresh_counter += 1
            surface = f"x{fresh_counter}q"
            relevant_id = builder.add_entity(surface, relevant_type_for(entity_type))
            for j in range(spec.distractors_per_mention):
                builder.add_entity(surface, DISTRACTOR_TYPES[j % len(DISTRACTOR_TYPES)])
            return surface, relevant_id
        forms = pool[entity_type]
        return forms[int(rng.integers(len(forms)))], None

    def make_sentence(idx: int, tag: str) -> Document:
        no_rel = bool(non_rule_pairs) and (not rule_pairs or rng.random() < spec.no_relation_rate)
        if no_rel:
            head_t, tail_t = non_rule_pairs[int(rng.integers(len(non_rule_pairs)))]
            predicate, relation = "alongside", None
        else:
            head_t, rel, tail_t = spec.relation_rules[int(rng.integers(len(spec.relation_rules)))]
            predicate, relation = predicates[rel], rel
        head_surface, head_kb = make_mention(head_t)
        tail_surface, tail_kb = make_mention(tail_t)
        if relation is not None and head_kb and tail_kb:
            builder.entity_edges.append((head_kb, KB_RELATION, tail_kb))
        text = f"{head_surface} {predicate} {tail_surface} ."
        relations = [(0, 1, relation)] if relation is not None else []
        return document_from_parts(
            f"{tag}{idx:04d}", text, entities=[(0, 1, head_t), (2, 3, tail_t)], relations=relations, schema=schema
        )

    train_docs = [make_sentence(i, "t") for i in range(spec.sentences)]
    dev_docs = [make_sentence(i, "d") for i in range(spec.dev_sentences)]

    type_edges = [
        (relevant_type_for(h), KB_RELATION, relevant_type_for(t)) for h, _, t in spec.relation_rules
    ]
    kb = KnowledgeBase(
        entities=builder.entities,
        semantic_types=semantic_types,
        kb_relations=[KB_RELATION],
        entity_edges=builder.entity_edges,
        type_edges=sorted(set(type_edges)),
    )
    return train_docs, dev_docs, kb, schema


def write_toy_files(spec: ToySpec, seed: int, out_dir) -> dict[str, Path]:
    """Write train.jsonl, dev.jsonl, kb.json, and schema.json; byte-identical
    for identical (spec, seed)."""
    from .corpus import save_dataset

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_docs, dev_docs, kb, schema = generate_toy(spec, seed)
    paths = {
        "train": out / "train.jsonl",
        "dev": out / "dev.jsonl",
        "kb": out / "kb.json",
        "schema": out / "schema.json",
    }
    save_dataset(train_docs, paths["train"])
    save_dataset(dev_docs, paths["dev"])
    kb.save(paths["kb"])
    schema.save(paths["schema"])
    return paths
