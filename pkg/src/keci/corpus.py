"""Dataset ingestion: tokenization, documents, span enumeration, CV splits.

Dataset files are JSONL, one document per line::

    {"id": str, "text": str,
     "entities": [{"start": int, "end": int, "type": str}],
     "relations": [{"head": int, "tail": int, "type": str}]}

Entity start/end are token indices, end-exclusive. The schema file lists
entity and relation type names; the reserved names "O" and "NO_REL" are
added implicitly at index 0 and must not appear in files.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

NON_ENTITY = "O"
NON_RELATION = "NO_REL"

_PUNCT = set(string.punctuation)


@dataclass(frozen=True, order=True)
class Span:
    """Token span, start inclusive, end exclusive."""

    start: int
    end: int

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class Token:
    text: str
    char_start: int
    char_end: int


@dataclass(frozen=True)
class GoldEntity:
    span: Span
    type: str


@dataclass(frozen=True)
class GoldRelation:
    head: int  # index into gold_entities
    tail: int
    type: str


@dataclass
class Document:
    id: str
    text: str
    tokens: list[Token]
    gold_entities: list[GoldEntity] = field(default_factory=list)
    gold_relations: list[GoldRelation] = field(default_factory=list)

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    def token_texts(self) -> list[str]:
        return [t.text for t in self.tokens]

    def span_text(self, span: Span) -> str:
        return " ".join(t.text for t in self.tokens[span.start : span.end])


@dataclass
class TaskSchema:
    """Entity and relation type inventories; index 0 is the reserved null type."""

    entity_types: list[str]
    relation_types: list[str]

    def __post_init__(self):
        for kind, names, reserved in (
            ("entity", self.entity_types, NON_ENTITY),
            ("relation", self.relation_types, NON_RELATION),
        ):
            if len(names) < 2:
                raise ValidationError(f"schema needs at least one non-null {kind} type")
            if names[0] != reserved:
                raise ValidationError(f"{kind} type list must start with the reserved name {reserved!r}")
            if len(set(names)) != len(names):
                raise ValidationError(f"duplicate {kind} type names")

    @classmethod
    def from_names(cls, entity_types: list[str], relation_types: list[str]) -> "TaskSchema":
        for reserved in (NON_ENTITY, NON_RELATION):
            if reserved in entity_types or reserved in relation_types:
                raise ValidationError(f"reserved type name {reserved!r} must not appear in schema files")
        return cls([NON_ENTITY, *entity_types], [NON_RELATION, *relation_types])

    @classmethod
    def load(cls, path) -> "TaskSchema":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise FormatError(f"schema file {path}: {e}") from e
        return cls.from_names(list(raw["entity_types"]), list(raw["relation_types"]))

    def save(self, path) -> None:
        payload = {"entity_types": self.entity_types[1:], "relation_types": self.relation_types[1:]}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def entity_index(self, name: str) -> int:
        return self.entity_types.index(name)

    def relation_index(self, name: str) -> int:
        return self.relation_types.index(name)

    @property
    def n_entity_types(self) -> int:
        return len(self.entity_types)

    @property
    def n_relation_types(self) -> int:
        return len(self.relation_types)


def tokenize(text: str) -> list[Token]:
    """Whitespace tokenization with leading/trailing punctuation detached.

    Character offsets always slice the original text exactly.
    """
    tokens: list[Token] = []
    pos = 0
    for chunk in text.split():
        start = text.index(chunk, pos)
        pos = start + len(chunk)
        lo, hi = 0, len(chunk)
        head = []
        while lo < hi and chunk[lo] in _PUNCT:
            head.append((chunk[lo], start + lo, start + lo + 1))
            lo += 1
        tail = []
        while hi > lo and chunk[hi - 1] in _PUNCT:
            tail.append((chunk[hi - 1], start + hi - 1, start + hi))
            hi -= 1
        tokens.extend(Token(*t) for t in head)
        if hi > lo:
            tokens.append(Token(chunk[lo:hi], start + lo, start + hi))
        tokens.extend(Token(*t) for t in reversed(tail))
    return tokens


def normalize_surface(text: str) -> str:
    """Lowercase and strip punctuation; used for alias matching."""
    lowered = text.lower()
    stripped = "".join(c for c in lowered if c not in _PUNCT)
    return " ".join(stripped.split())


def enumerate_spans(n_tokens: int, max_length: int) -> list[Span]:
    """All spans of length 1..max_length, ordered by (start, end)."""
    if max_length < 1:
        raise ValueError(f"max_length must be >= 1, got {max_length}")
    spans = []
    for start in range(n_tokens):
        for end in range(start + 1, min(start + max_length, n_tokens) + 1):
            spans.append(Span(start, end))
    return spans


def _build_document(obj: dict, schema: TaskSchema | None) -> Document:
    doc_id = str(obj["id"])
    text = obj["text"]
    tokens = tokenize(text)
    n = len(tokens)
    entities = []
    for ent in obj.get("entities", []):
        span = Span(int(ent["start"]), int(ent["end"]))
        if not (0 <= span.start < span.end <= n):
            raise ValidationError(f"document {doc_id!r}: entity span ({span.start}, {span.end}) out of range for {n} tokens")
        etype = ent["type"]
        if etype == NON_ENTITY:
            raise ValidationError(f"document {doc_id!r}: reserved entity type {NON_ENTITY!r} in file")
        if schema is not None and etype not in schema.entity_types:
            raise ValidationError(f"document {doc_id!r}: unknown entity type {etype!r}")
        entities.append(GoldEntity(span, etype))
    relations = []
    for rel in obj.get("relations", []):
        head, tail = int(rel["head"]), int(rel["tail"])
        if not (0 <= head < len(entities)) or not (0 <= tail < len(entities)):
            raise ValidationError(f"document {doc_id!r}: relation endpoint out of range")
        if head == tail:
            raise ValidationError(f"document {doc_id!r}: relation head and tail are the same entity")
        rtype = rel["type"]
        if rtype == NON_RELATION:
            raise ValidationError(f"document {doc_id!r}: reserved relation type {NON_RELATION!r} in file")
        if schema is not None and rtype not in schema.relation_types:
            raise ValidationError(f"document {doc_id!r}: unknown relation type {rtype!r}")
        relations.append(GoldRelation(head, tail, rtype))
    return Document(doc_id, text, tokens, entities, relations)


def document_from_parts(doc_id, text, entities=(), relations=(), schema=None) -> Document:
    """Build and validate a Document from plain tuples (used by generators and tests)."""
    obj = {
        "id": doc_id,
        "text": text,
        "entities": [{"start": s, "end": e, "type": t} for (s, e, t) in entities],
        "relations": [{"head": h, "tail": t, "type": r} for (h, t, r) in relations],
    }
    return _build_document(obj, schema)


def load_dataset(path, schema: TaskSchema | None = None) -> list[Document]:
    docs = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{line_no}: malformed JSON: {e}") from e
            try:
                docs.append(_build_document(obj, schema))
            except (KeyError, TypeError) as e:
                raise FormatError(f"{path}:{line_no}: missing or malformed field: {e}") from e
    return docs


def save_dataset(docs: list[Document], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for doc in docs:
            obj = {
                "id": doc.id,
                "text": doc.text,
                "entities": [{"start": e.span.start, "end": e.span.end, "type": e.type} for e in doc.gold_entities],
                "relations": [{"head": r.head, "tail": r.tail, "type": r.type} for r in doc.gold_relations],
            }
            f.write(json.dumps(obj, sort_keys=True) + "\n")


def kfold_split(docs: list[Document], k: int, seed: int) -> list[tuple[list[Document], list[Document]]]:
    """Deterministic k-fold partitions: disjoint test folds covering all docs."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > len(docs):
        raise ValueError(f"k={k} exceeds the number of documents ({len(docs)})")
    order = np.random.default_rng(seed).permutation(len(docs))
    folds = []
    for i in range(k):
        test_idx = set(order[i::k].tolist())
        test = [docs[j] for j in sorted(test_idx)]
        train = [docs[j] for j in range(len(docs)) if j not in test_idx]
        folds.append((train, test))
    return folds
