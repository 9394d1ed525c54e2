"""Decoding predictions into span graphs, P/R/F1 scoring, the ablation
harness, and attention-pattern analysis.

Scoring is strict: an entity counts as correct only with exact boundaries
and type; a relation only when head span+type, tail span+type, and the
relation type all match, directed. Overlapping and nested entities are
scored like any others.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Document, Span, TaskSchema
from .kb import KnowledgeBase
from .model import DocResult, ModelConfig, Pipeline, VARIANTS, run_documents


@dataclass
class PredictedGraph:
    """Decoded output for one document."""

    doc_id: str
    entities: list[tuple[Span, str]] = field(default_factory=list)
    relations: list[tuple[int, int, str]] = field(default_factory=list)  # indices into entities


@dataclass
class PRF:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "PRF":
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        return cls(p, r, f1, tp, fp, fn)

    def to_json_obj(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
        }


def decode_graph(result: DocResult, schema: TaskSchema, config: ModelConfig) -> PredictedGraph:
    """Entities are argmax types over kept spans (ties to the lowest type
    index); relations come from the pair distributions between predicted
    entities: argmax in softmax mode, all types above 0.5 in sigmoid mode."""
    graph = PredictedGraph(doc_id=result.doc.id)
    if result.initial is None or not result.initial.kept:
        return graph
    use_final = result.final_entity_probs is not None
    ent_probs = result.final_entity_probs.data if use_final else result.initial.entity_probs.data[result.initial.kept]
    kept_spans = result.kept_spans

    entity_of_pos: dict[int, int] = {}
    for pos, span in enumerate(kept_spans):
        t = int(np.argmax(ent_probs[pos]))
        if t != 0:
            entity_of_pos[pos] = len(graph.entities)
            graph.entities.append((span, schema.entity_types[t]))

    pairs = result.initial.pairs
    if use_final:
        rel_probs, rel_logits = result.final_relation_probs, result.final_relation_logits
    else:
        rel_probs, rel_logits = result.initial.relation_probs, result.initial.relation_logits
    for p, (a, b) in enumerate(pairs):
        if a not in entity_of_pos or b not in entity_of_pos:
            continue
        if config.relation_loss_mode == "sigmoid_bce":
            sig = 1.0 / (1.0 + np.exp(-rel_logits.data[p].astype(np.float64)))
            for k in range(1, schema.n_relation_types):
                if sig[k] > 0.5:
                    graph.relations.append((entity_of_pos[a], entity_of_pos[b], schema.relation_types[k]))
        else:
            k = int(np.argmax(rel_probs.data[p]))
            if k != 0:
                graph.relations.append((entity_of_pos[a], entity_of_pos[b], schema.relation_types[k]))
    return graph


def _entity_items(graph: PredictedGraph) -> list[tuple[int, int, str]]:
    return [(span.start, span.end, t) for span, t in graph.entities]


def _gold_entity_items(doc: Document) -> list[tuple[int, int, str]]:
    return [(e.span.start, e.span.end, e.type) for e in doc.gold_entities]


def _relation_items(graph: PredictedGraph) -> list[tuple]:
    items = []
    for head, tail, rtype in graph.relations:
        hs, ht = graph.entities[head]
        ts, tt = graph.entities[tail]
        items.append((hs.start, hs.end, ht, ts.start, ts.end, tt, rtype))
    return items


def _gold_relation_items(doc: Document) -> list[tuple]:
    items = []
    for rel in doc.gold_relations:
        h = doc.gold_entities[rel.head]
        t = doc.gold_entities[rel.tail]
        items.append((h.span.start, h.span.end, h.type, t.span.start, t.span.end, t.type, rel.type))
    return items


def _count_matches(pred_items: list, gold_items: list) -> tuple[int, int, int]:
    """Multiset tp/fp/fn."""
    pred_c, gold_c = Counter(pred_items), Counter(gold_items)
    tp = sum((pred_c & gold_c).values())
    return tp, sum(pred_c.values()) - tp, sum(gold_c.values()) - tp


def _score(pred_per_doc: list[list], gold_per_doc: list[list], mode: str, type_of) -> PRF:
    if mode == "micro":
        tp = fp = fn = 0
        for p_items, g_items in zip(pred_per_doc, gold_per_doc):
            dtp, dfp, dfn = _count_matches(p_items, g_items)
            tp, fp, fn = tp + dtp, fp + dfp, fn + dfn
        return PRF.from_counts(tp, fp, fn)
    if mode != "macro":
        raise ValueError(f"unknown scoring mode {mode!r}")
    gold_types = sorted({type_of(item) for g_items in gold_per_doc for item in g_items})
    f1s = []
    for t in gold_types:
        tp = fp = fn = 0
        for p_items, g_items in zip(pred_per_doc, gold_per_doc):
            dtp, dfp, dfn = _count_matches(
                [i for i in p_items if type_of(i) == t], [i for i in g_items if type_of(i) == t]
            )
            tp, fp, fn = tp + dtp, fp + dfp, fn + dfn
        f1s.append(PRF.from_counts(tp, fp, fn).f1)
    mean_f1 = float(np.mean(f1s)) if f1s else 0.0
    return PRF(mean_f1, mean_f1, mean_f1, 0, 0, 0)


def score_entities(preds: Sequence[PredictedGraph], golds: Sequence[Document], mode: str = "micro") -> PRF:
    """Exact (start, end, type) matching with multiset semantics; micro pools
    counts over the corpus, macro averages per-type F1 over gold types."""
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions for {len(golds)} documents")
    return _score(
        [_entity_items(p) for p in preds],
        [_gold_entity_items(d) for d in golds],
        mode,
        type_of=lambda item: item[2],
    )


def score_relations(preds: Sequence[PredictedGraph], golds: Sequence[Document], mode: str = "micro") -> PRF:
    """Strict directed matching on (head span+type, tail span+type, relation type)."""
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions for {len(golds)} documents")
    return _score(
        [_relation_items(p) for p in preds],
        [_gold_relation_items(d) for d in golds],
        mode,
        type_of=lambda item: item[6],
    )


def metrics_json(preds: Sequence[PredictedGraph], golds: Sequence[Document]) -> dict:
    return {
        "entity": {
            "micro": score_entities(preds, golds, "micro").to_json_obj(),
            "macro": score_entities(preds, golds, "macro").to_json_obj(),
        },
        "relation": {
            "micro": score_relations(preds, golds, "micro").to_json_obj(),
            "macro": score_relations(preds, golds, "macro").to_json_obj(),
        },
    }


def metrics_table(rows: dict[str, dict]) -> str:
    """Human-readable table: one row per label, entity/relation micro and macro F1."""
    header = f"{'run':24s} {'ent_micro':>9s} {'ent_macro':>9s} {'rel_micro':>9s} {'rel_macro':>9s}"
    lines = [header, "-" * len(header)]
    for label, m in rows.items():
        lines.append(
            f"{label:24s} {m['entity']['micro']['f1']:9.4f} {m['entity']['macro']['f1']:9.4f} "
            f"{m['relation']['micro']['f1']:9.4f} {m['relation']['macro']['f1']:9.4f}"
        )
    return "\n".join(lines)


def evaluate_pipeline(pipeline: Pipeline, docs: Sequence[Document], threads: int = 1) -> dict:
    results = run_documents(pipeline, docs, threads=threads)
    preds = [decode_graph(r, pipeline.schema, pipeline.config) for r in results]
    return metrics_json(preds, docs)


def run_ablation(
    variants: Sequence[str],
    config: ModelConfig,
    train_docs: list[Document],
    dev_docs: list[Document],
    kb: KnowledgeBase,
    schema: TaskSchema,
) -> dict[str, dict]:
    """Train each variant with the same config/seed and evaluate it on the
    held-out documents; returns a metrics row per variant."""
    from .train import fit

    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown ablation variant {v!r}; pick from {sorted(VARIANTS)}")
    rows = {}
    for variant in variants:
        outcome = fit(config, train_docs, dev_docs, kb, schema, variant=variant)
        rows[variant] = evaluate_pipeline(outcome.pipeline, dev_docs)
    return rows


@dataclass
class AttentionReport:
    """Average candidate attention per semantic type, plus the sentinel mean."""

    per_type: dict[str, dict]  # type -> {"mean": float, "count": int}
    sentinel_mean: float
    n_spans: int

    def to_json_obj(self) -> dict:
        return {"per_type": self.per_type, "sentinel_mean": self.sentinel_mean, "n_spans": self.n_spans}


def attention_report(pipeline: Pipeline, docs: Sequence[Document], threads: int = 1) -> AttentionReport:
    """Bucket candidate attention weights by the candidate's semantic types;
    a candidate with several types contributes its weight to each."""
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    sentinel_sum = 0.0
    n_spans = 0
    for result in run_documents(pipeline, docs, threads=threads):
        if result.kg is None:
            continue
        for att in result.attention:
            n_spans += 1
            sentinel_sum += att.sentinel_weight
            for node_idx, weight in zip(att.candidate_nodes, att.candidate_weights):
                entity = pipeline.kb.entity_by_id(result.kg.nodes[node_idx].ref)
                for sem_type in entity.semantic_types:
                    sums[sem_type] = sums.get(sem_type, 0.0) + weight
                    counts[sem_type] = counts.get(sem_type, 0) + 1
    per_type = {t: {"mean": sums[t] / counts[t], "count": counts[t]} for t in sorted(sums)}
    return AttentionReport(
        per_type=per_type,
        sentinel_mean=sentinel_sum / n_spans if n_spans else 1.0,
        n_spans=n_spans,
    )
