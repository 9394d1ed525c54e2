"""Input validation helpers shared by the estimator, loaders, and CLI."""

from __future__ import annotations

from typing import Sequence

from .corpus import Document, TaskSchema
from .errors import ValidationError


def check_config(config) -> None:
    for name in ("d", "d_tok", "d_len", "d_kb", "max_span_length", "gcn_layers", "rgcn_layers"):
        value = getattr(config, name)
        minimum = 0 if name.endswith("layers") else 1
        if value < minimum:
            raise ValidationError(f"config.{name} must be >= {minimum}, got {value}")
    if not (0 < config.pruning_ratio <= 1):
        raise ValidationError(f"config.pruning_ratio must be in (0, 1], got {config.pruning_ratio}")
    if config.final_loss_weight <= 0:
        raise ValidationError(f"config.final_loss_weight must be positive, got {config.final_loss_weight}")
    if config.relation_loss_mode not in ("softmax_ce", "sigmoid_bce"):
        raise ValidationError(f"unknown relation_loss_mode {config.relation_loss_mode!r}")
    if config.dtype not in ("float32", "float64"):
        raise ValidationError(f"config.dtype must be 'float32' or 'float64', got {config.dtype!r}")
    if config.batch_size < 1 or config.epochs < 0 or config.min_count < 1:
        raise ValidationError("batch_size must be >= 1, epochs >= 0, min_count >= 1")
    if config.lr_lower <= 0 or config.lr_upper <= 0:
        raise ValidationError("learning rates must be positive")


def check_documents(docs: Sequence[Document], schema: TaskSchema) -> None:
    if any(not isinstance(d, Document) for d in docs):
        raise ValidationError("expected a sequence of Document objects")
    for doc in docs:
        n = doc.n_tokens
        for ent in doc.gold_entities:
            if not (0 <= ent.span.start < ent.span.end <= n):
                raise ValidationError(f"document {doc.id!r}: gold span out of range")
            if ent.type not in schema.entity_types:
                raise ValidationError(f"document {doc.id!r}: entity type {ent.type!r} not in schema")
        for rel in doc.gold_relations:
            if not (0 <= rel.head < len(doc.gold_entities)) or not (0 <= rel.tail < len(doc.gold_entities)):
                raise ValidationError(f"document {doc.id!r}: relation endpoint out of range")
            if rel.type not in schema.relation_types:
                raise ValidationError(f"document {doc.id!r}: relation type {rel.type!r} not in schema")


def check_kb_dims(kb, config) -> None:
    if kb.entities and kb.embedding_dim != config.d_kb:
        raise ValidationError(
            f"KB embedding dim {kb.embedding_dim} does not match config.d_kb {config.d_kb}"
        )
