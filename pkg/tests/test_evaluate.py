"""Scoring tests: decode rules, P/R/F1 against a brute-force oracle,
ablation wiring, attention report."""

import numpy as np
import pytest

from keci import autodiff as ad
from keci.corpus import Document, Span, TaskSchema, document_from_parts, tokenize
from keci.evaluate import (
    PRF,
    PredictedGraph,
    decode_graph,
    metrics_json,
    score_entities,
    score_relations,
)
from keci.model import ModelConfig, init_parameters


# ---------------------------------------------------------------------------
# brute-force oracle: greedy one-to-one matching over explicit lists
# ---------------------------------------------------------------------------


def oracle_counts(pred_items, gold_items):
    gold_left = list(gold_items)
    tp = 0
    for item in pred_items:
        if item in gold_left:
            gold_left.remove(item)
            tp += 1
    return tp, len(pred_items) - tp, len(gold_items) - tp


def oracle_prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def random_case(rng, n_docs=4):
    """Random (preds, golds) over a small inventory, duplicates included."""
    types = ["A", "B", "C"]
    rels = ["R1", "R2"]
    preds, golds = [], []
    for d in range(n_docs):
        text = " ".join(["tok"] * 8)
        gold_entities = []
        for _ in range(int(rng.integers(0, 5))):
            start = int(rng.integers(0, 7))
            end = start + int(rng.integers(1, 3))
            gold_entities.append((Span(start, min(end, 8)), str(rng.choice(types))))
        gold_rel = []
        if len(gold_entities) >= 2:
            for _ in range(int(rng.integers(0, 3))):
                h, t = rng.choice(len(gold_entities), size=2, replace=False)
                gold_rel.append((int(h), int(t), str(rng.choice(rels))))
        doc = Document(
            f"d{d}",
            text,
            tokenize(text),
            [],
            [],
        )
        from keci.corpus import GoldEntity, GoldRelation

        doc.gold_entities = [GoldEntity(s, t) for s, t in gold_entities]
        doc.gold_relations = [GoldRelation(h, t, r) for h, t, r in gold_rel]
        golds.append(doc)

        graph = PredictedGraph(doc_id=f"d{d}")
        for _ in range(int(rng.integers(0, 5))):
            start = int(rng.integers(0, 7))
            end = start + int(rng.integers(1, 3))
            graph.entities.append((Span(start, min(end, 8)), str(rng.choice(types))))
        if len(graph.entities) >= 2:
            for _ in range(int(rng.integers(0, 3))):
                h, t = rng.choice(len(graph.entities), size=2, replace=False)
                graph.relations.append((int(h), int(t), str(rng.choice(rels))))
        preds.append(graph)
    return preds, golds


def oracle_entity_micro(preds, golds):
    tp = fp = fn = 0
    for graph, doc in zip(preds, golds):
        p_items = [(s.start, s.end, t) for s, t in graph.entities]
        g_items = [(e.span.start, e.span.end, e.type) for e in doc.gold_entities]
        dtp, dfp, dfn = oracle_counts(p_items, g_items)
        tp, fp, fn = tp + dtp, fp + dfp, fn + dfn
    return oracle_prf(tp, fp, fn)


def oracle_relation_micro(preds, golds):
    tp = fp = fn = 0
    for graph, doc in zip(preds, golds):
        p_items = []
        for h, t, r in graph.relations:
            hs, ht = graph.entities[h]
            ts, tt = graph.entities[t]
            p_items.append((hs.start, hs.end, ht, ts.start, ts.end, tt, r))
        g_items = []
        for rel in doc.gold_relations:
            he = doc.gold_entities[rel.head]
            te = doc.gold_entities[rel.tail]
            g_items.append((he.span.start, he.span.end, he.type, te.span.start, te.span.end, te.type, rel.type))
        dtp, dfp, dfn = oracle_counts(p_items, g_items)
        tp, fp, fn = tp + dtp, fp + dfp, fn + dfn
    return oracle_prf(tp, fp, fn)


def oracle_entity_macro(preds, golds):
    gold_types = sorted({e.type for doc in golds for e in doc.gold_entities})
    f1s = []
    for typ in gold_types:
        tp = fp = fn = 0
        for graph, doc in zip(preds, golds):
            p_items = [(s.start, s.end, t) for s, t in graph.entities if t == typ]
            g_items = [(e.span.start, e.span.end, e.type) for e in doc.gold_entities if e.type == typ]
            dtp, dfp, dfn = oracle_counts(p_items, g_items)
            tp, fp, fn = tp + dtp, fp + dfp, fn + dfn
        f1s.append(oracle_prf(tp, fp, fn)[2])
    return float(np.mean(f1s)) if f1s else 0.0


class TestPrfFormulas:
    def test_perfect_match(self):
        prf = PRF.from_counts(5, 0, 0)
        assert prf.precision == prf.recall == prf.f1 == 1.0

    def test_two_thirds_case(self):
        prf = PRF.from_counts(2, 1, 1)
        assert prf.precision == pytest.approx(2 / 3)
        assert prf.recall == pytest.approx(2 / 3)
        assert prf.f1 == pytest.approx(2 / 3)

    def test_zero_denominators(self):
        prf = PRF.from_counts(0, 0, 0)
        assert prf.f1 == 0.0


class TestScoringAgainstOracle:
    def test_identity_scores_one(self):
        rng = np.random.default_rng(0)
        _, golds = random_case(rng)
        preds = []
        for doc in golds:
            graph = PredictedGraph(doc_id=doc.id)
            graph.entities = [(e.span, e.type) for e in doc.gold_entities]
            graph.relations = [(r.head, r.tail, r.type) for r in doc.gold_relations]
            preds.append(graph)
        assert score_entities(preds, golds, "micro").f1 == pytest.approx(1.0)
        if any(doc.gold_relations for doc in golds):
            assert score_relations(preds, golds, "micro").f1 == pytest.approx(1.0)
        assert score_entities(preds, golds, "macro").f1 == pytest.approx(1.0)

    def test_micro_matches_oracle_on_random_cases(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            preds, golds = random_case(rng)
            got = score_entities(preds, golds, "micro")
            assert (got.precision, got.recall, got.f1) == pytest.approx(oracle_entity_micro(preds, golds))
            got_r = score_relations(preds, golds, "micro")
            assert (got_r.precision, got_r.recall, got_r.f1) == pytest.approx(oracle_relation_micro(preds, golds))

    def test_macro_matches_oracle_on_random_cases(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            preds, golds = random_case(rng)
            assert score_entities(preds, golds, "macro").f1 == pytest.approx(oracle_entity_macro(preds, golds))

    def test_empty_predictions(self):
        rng = np.random.default_rng(3)
        _, golds = random_case(rng)
        preds = [PredictedGraph(doc_id=d.id) for d in golds]
        prf = score_relations(preds, golds, "micro")
        assert prf.precision == 0.0 and prf.recall == 0.0 and prf.f1 == 0.0

    def test_wrong_relation_type_counts_fp_and_fn(self):
        doc = document_from_parts(
            "d", "a binds b", entities=[(0, 1, "X"), (2, 3, "Y")], relations=[(0, 1, "R1")]
        )
        graph = PredictedGraph(doc_id="d")
        graph.entities = [(Span(0, 1), "X"), (Span(2, 3), "Y")]
        graph.relations = [(0, 1, "R2")]
        prf = score_relations([graph], [doc], "micro")
        assert prf.tp == 0 and prf.fp == 1 and prf.fn == 1

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            score_entities([], [document_from_parts("d", "x")], "micro")


def make_result(entity_rows, rel_rows, kept, spans, n_tokens=6, mode="softmax_ce"):
    """Assemble a DocResult by hand from raw distribution matrices."""
    from keci.model import DocResult
    from keci.spangraph import InitialPrediction, ordered_pairs

    doc = document_from_parts("d", " ".join(["tok"] * n_tokens))
    pairs = ordered_pairs(len(kept))
    ent = ad.Tensor(np.asarray(entity_rows))
    rel = ad.Tensor(np.asarray(rel_rows).reshape(len(pairs), -1) if pairs else np.zeros((0, 2)))
    logits = ad.Tensor(np.log(np.clip(rel.data, 1e-9, None))) if rel.data.size else rel
    initial = InitialPrediction(ad.Tensor(np.asarray(entity_rows)), kept, pairs, logits, rel)
    result = DocResult(doc=doc, spans=spans, initial=initial)
    result.final_entity_probs = ad.Tensor(np.asarray(entity_rows)[kept])
    result.final_relation_logits = logits
    result.final_relation_probs = rel
    return result


class TestDecodeGraph:
    def setup_method(self):
        self.schema = TaskSchema.from_names(["A", "B"], ["R"])
        self.config = ModelConfig(d=4, d_tok=3, d_len=2, d_kb=3)
        self.spans = [Span(0, 1), Span(1, 2), Span(2, 3)]

    def test_all_non_entity_gives_empty_graph(self):
        rows = np.tile([1.0, 0.0, 0.0], (3, 1))
        result = make_result(rows, np.zeros((6, 2)), [0, 1, 2], self.spans)
        result.final_relation_probs = ad.Tensor(np.tile([1.0, 0.0], (6, 1)))
        graph = decode_graph(result, self.schema, self.config)
        assert graph.entities == [] and graph.relations == []

    def test_non_relation_argmax_gives_no_relations(self):
        rows = np.array([[0.1, 0.8, 0.1], [0.1, 0.1, 0.8]])
        rel = np.tile([0.9, 0.1], (2, 1))
        result = make_result(rows, rel, [0, 1], self.spans[:2])
        graph = decode_graph(result, self.schema, self.config)
        assert len(graph.entities) == 2 and graph.relations == []

    def test_relation_between_predicted_entities(self):
        rows = np.array([[0.1, 0.8, 0.1], [0.1, 0.1, 0.8]])
        rel = np.array([[0.2, 0.8], [0.9, 0.1]])  # (0,1) has R, (1,0) does not
        result = make_result(rows, rel, [0, 1], self.spans[:2])
        graph = decode_graph(result, self.schema, self.config)
        assert graph.relations == [(0, 1, "R")]

    def test_argmax_tie_breaks_to_lowest_type_index(self):
        rows = np.array([[0.2, 0.4, 0.4]])
        result = make_result(rows, np.zeros((0, 2)), [0], self.spans[:1])
        graph = decode_graph(result, self.schema, self.config)
        assert graph.entities == [(Span(0, 1), "A")]

    def test_relation_argmax_tie_breaks_to_lowest_type_index(self):
        schema = TaskSchema.from_names(["A"], ["R1", "R2"])
        rows = np.array([[0.1, 0.9], [0.1, 0.9]])
        rel = np.tile([0.2, 0.4, 0.4], (2, 1))  # R1 and R2 tied, both above NO_REL
        spans = [Span(0, 1), Span(1, 2)]
        result = make_result(rows, rel, [0, 1], spans)
        graph = decode_graph(result, schema, self.config)
        assert graph.relations == [(0, 1, "R1"), (1, 0, "R1")]

    def test_nested_spans_both_kept(self):
        spans = [Span(0, 1), Span(0, 2)]
        rows = np.array([[0.1, 0.8, 0.1], [0.1, 0.1, 0.8]])
        result = make_result(rows, np.tile([1.0, 0.0], (2, 1)), [0, 1], spans)
        graph = decode_graph(result, self.schema, self.config)
        assert (Span(0, 1), "A") in graph.entities and (Span(0, 2), "B") in graph.entities

    def test_sigmoid_mode_thresholds_at_half(self):
        config = ModelConfig(d=4, d_tok=3, d_len=2, d_kb=3, relation_loss_mode="sigmoid_bce")
        rows = np.array([[0.1, 0.8, 0.1], [0.1, 0.1, 0.8]])
        result = make_result(rows, np.tile([0.5, 0.5], (2, 1)), [0, 1], self.spans[:2])
        # logits chosen directly: pair (0,1) above threshold, pair (1,0) below
        result.final_relation_logits = ad.Tensor(np.array([[-3.0, 2.0], [-3.0, -2.0]]))
        graph = decode_graph(result, self.schema, config)
        assert graph.relations == [(0, 1, "R")]

    def test_deterministic_and_idempotent(self):
        rng = np.random.default_rng(4)
        rows = rng.dirichlet(np.ones(3), size=3)
        rel = rng.dirichlet(np.ones(2), size=6)
        result = make_result(rows, rel, [0, 1, 2], self.spans)
        a = decode_graph(result, self.schema, self.config)
        b = decode_graph(result, self.schema, self.config)
        assert a.entities == b.entities and a.relations == b.relations


class TestVariantParameterSets:
    """Ablations differ from the full model only in the documented parameter groups."""

    def _names(self, variant):
        from keci.kb import kb_from_json_obj

        config = ModelConfig(d=4, d_tok=3, d_len=2, d_kb=3, gcn_layers=1, rgcn_layers=1)
        schema = TaskSchema.from_names(["A"], ["R"])
        kb = kb_from_json_obj(
            {
                "semantic_types": ["T"],
                "kb_relations": ["r"],
                "entities": [
                    {"id": "C0", "aliases": ["x"], "definition": "", "semantic_types": ["T"], "embedding": [0, 0, 0]}
                ],
                "entity_edges": [],
                "type_edges": [],
            }
        )
        return set(init_parameters(config, schema, kb, 5, variant).names())

    def test_no_bigcn_drops_exactly_gcn_parameters(self):
        full, ablated = self._names("full"), self._names("no_bigcn")
        assert full - ablated == {n for n in full if n.startswith("gcn.")}
        assert ablated <= full

    def test_no_rgcn_drops_exactly_rgcn_parameters(self):
        full, ablated = self._names("full"), self._names("no_rgcn")
        assert full - ablated == {n for n in full if n.startswith("rgcn.")}

    def test_flat_attention_drops_both_gcn_stacks(self):
        full, ablated = self._names("full"), self._names("flat_attention")
        assert full - ablated == {n for n in full if n.startswith(("gcn.", "rgcn."))}

    def test_sent_context_only_keeps_encoder_and_initial_classifiers(self):
        names = self._names("sent_context_only")
        assert names == {n for n in self._names("full") if n.startswith(("embed.", "encoder.", "initial."))}

    def test_shared_parameters_initialize_identically(self):
        from keci.kb import kb_from_json_obj

        config = ModelConfig(d=4, d_tok=3, d_len=2, d_kb=3, gcn_layers=1, rgcn_layers=1, seed=9)
        schema = TaskSchema.from_names(["A"], ["R"])
        kb = kb_from_json_obj(
            {
                "semantic_types": ["T"],
                "kb_relations": ["r"],
                "entities": [
                    {"id": "C0", "aliases": ["x"], "definition": "", "semantic_types": ["T"], "embedding": [0, 0, 0]}
                ],
                "entity_edges": [],
                "type_edges": [],
            }
        )
        full = init_parameters(config, schema, kb, 5, "full")
        flat = init_parameters(config, schema, kb, 5, "flat_attention")
        for name in flat.names():
            np.testing.assert_array_equal(full[name].data, flat[name].data)


class TestMetricsJson:
    def test_shape_of_output(self):
        rng = np.random.default_rng(5)
        preds, golds = random_case(rng)
        obj = metrics_json(preds, golds)
        assert set(obj) == {"entity", "relation"}
        for task in obj.values():
            assert set(task) == {"micro", "macro"}
            assert "f1" in task["micro"]
