"""Sentinel-attention fusion of span states with candidate-entity states,
and the final span-graph classifiers.

Every span gets a learned sentinel vector that competes in the same
softmax as its KB candidates, so the model can fall back to local context
when no candidate is relevant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .spangraph import ordered_pairs


@dataclass
class SpanAttention:
    """Read-only attention summary for one span."""

    sentinel_weight: float
    candidate_nodes: list[int]  # KG node indices
    candidate_weights: list[float]


def score_candidate(span_state: Tensor, node_state: Tensor, params: ParameterStore) -> Tensor:
    """Scalar relevance score of one candidate node for one span, [1 x 1]."""
    return _score_pairs(ad.concat([span_state, node_state], axis=1), params)


def _score_pairs(features: Tensor, params: ParameterStore) -> Tensor:
    hidden = ad.relu(ad.linear(features, params["fusion.score.w0"], params["fusion.score.b0"]))
    return ad.linear(hidden, params["fusion.score.w1"], params["fusion.score.b1"])


def attention_fuse(sentinel: Tensor, sentinel_score: Tensor, cand_states: Tensor | None, cand_scores: Tensor | None) -> tuple[Tensor, np.ndarray]:
    """Combine a sentinel vector with candidate vectors by softmax over their
    scores. Returns the fused [1 x d] vector and the weight vector (sentinel
    first). With no candidates the sentinel weight is exactly 1."""
    if cand_states is None or cand_states.shape[0] == 0:
        weights = np.ones(1, dtype=sentinel.dtype)
        return sentinel, weights
    scores = ad.concat([sentinel_score, cand_scores], axis=0)  # [(1+q) x 1]
    betas = ad.softmax(scores, axis=0)
    stacked = ad.concat([sentinel, cand_states], axis=0)  # [(1+q) x d]
    fused = ad.matmul(ad.transpose(betas), stacked)
    return fused, betas.data.reshape(-1).copy()


def fuse_spans(
    span_states: Tensor,
    candidate_nodes: list[list[int]],
    node_states: Tensor,
    params: ParameterStore,
) -> tuple[Tensor, list[SpanAttention]]:
    """Knowledge-aware representation per span, [m x d], plus attention
    summaries. ``candidate_nodes[i]`` lists KG node indices for span i."""
    m = span_states.shape[0]
    if m == 0:
        return span_states, []
    sentinels = ad.linear(span_states, params["fusion.sentinel.w"], params["fusion.sentinel.b"])
    sentinel_scores = _score_pairs(ad.concat([span_states, sentinels], axis=1), params)
    fused_rows = []
    attention = []
    for i in range(m):
        cands = candidate_nodes[i]
        sent_vec = ad.gather_rows(sentinels, [i])
        sent_score = ad.gather_rows(sentinel_scores, [i])
        if cands:
            cand_states = ad.gather_rows(node_states, cands)
            span_rep = ad.gather_rows(span_states, [i] * len(cands))
            cand_scores = _score_pairs(ad.concat([span_rep, cand_states], axis=1), params)
            fused, weights = attention_fuse(sent_vec, sent_score, cand_states, cand_scores)
        else:
            fused, weights = attention_fuse(sent_vec, sent_score, None, None)
        fused_rows.append(fused)
        attention.append(
            SpanAttention(
                sentinel_weight=float(weights[0]),
                candidate_nodes=list(cands),
                candidate_weights=[float(w) for w in weights[1:]],
            )
        )
    fused_all = ad.concat(fused_rows, axis=0) if len(fused_rows) > 1 else fused_rows[0]
    return fused_all, attention


def classify_final(fused: Tensor, params: ParameterStore) -> tuple[Tensor, Tensor, list[tuple[int, int]], Tensor, Tensor]:
    """Final entity and relation distributions from fused representations.

    Mirrors the initial classifiers but with separate parameters; returns
    (entity_logits, entity_probs, pairs, relation_logits, relation_probs).
    """
    ent_logits = ad.linear(fused, params["final.entity.w"], params["final.entity.b"])
    ent_probs = ad.softmax(ent_logits, axis=1)
    m = fused.shape[0]
    pairs = ordered_pairs(m)
    n_rel = params["final.relation.w1"].shape[1]
    if not pairs:
        empty = ad.constant(np.zeros((0, n_rel), dtype=params.dtype))
        return ent_logits, ent_probs, pairs, empty, empty
    idx_a = [a for a, _ in pairs]
    idx_b = [b for _, b in pairs]
    rep_a = ad.gather_rows(fused, idx_a)
    rep_b = ad.gather_rows(fused, idx_b)
    features = ad.concat([rep_a, rep_b, ad.mul(rep_a, rep_b)], axis=1)
    hidden = ad.relu(ad.linear(features, params["final.relation.w0"], params["final.relation.b0"]))
    rel_logits = ad.linear(hidden, params["final.relation.w1"], params["final.relation.b1"])
    return ent_logits, ent_probs, pairs, rel_logits, ad.softmax(rel_logits, axis=1)
