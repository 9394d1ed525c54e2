"""Initial span graph: entity/relation classifiers, pruning, and the
bidirectional GCN that mixes relational information into span states."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .corpus import Span


@dataclass
class InitialPrediction:
    """Entity distributions for all enumerated spans, the kept span indices,
    and relation distributions over ordered kept pairs."""

    entity_probs: Tensor  # [m_all x |E|]
    kept: list[int]  # indices into the enumerated span list
    pairs: list[tuple[int, int]]  # ordered (i, j) positions within `kept`, i != j
    relation_logits: Tensor  # [P x |R|]
    relation_probs: Tensor  # [P x |R|], rows softmax-normalized


def classify_entities_initial(span_reps: Tensor, params: ParameterStore) -> tuple[Tensor, Tensor]:
    """Softmax entity-type distributions per span; returns (logits, probs)."""
    logits = ad.linear(span_reps, params["initial.entity.w"], params["initial.entity.b"])
    return logits, ad.softmax(logits, axis=1)


def prune_spans(non_entity_scores: np.ndarray, spans: list[Span], ratio: float, n_tokens: int) -> list[int]:
    """Keep up to ceil(ratio * n_tokens) spans with the lowest probability of
    being a non-entity; ties break by (start, end) order. The returned
    indices are in span order."""
    if not (0 < ratio <= 1):
        raise ValueError(f"pruning ratio must be in (0, 1], got {ratio}")
    budget = math.ceil(ratio * n_tokens)
    scores = np.asarray(non_entity_scores, dtype=np.float64)
    if scores.shape[0] != len(spans):
        raise ValueError(f"{scores.shape[0]} scores for {len(spans)} spans")
    # spans are already sorted by (start, end), so a stable sort on the
    # scores implements the tie rule
    order = np.argsort(scores, kind="stable")
    kept = sorted(order[: min(budget, len(spans))].tolist())
    return kept


def ordered_pairs(m: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(m) for j in range(m) if i != j]


def classify_relations_initial(kept_reps: Tensor, params: ParameterStore) -> tuple[list[tuple[int, int]], Tensor, Tensor]:
    """Relation distributions for every ordered pair of kept spans.

    Each pair is scored from concat(rep_i, rep_j, rep_i * rep_j) through a
    one-hidden-layer ReLU network; returns (pairs, logits, probs).
    """
    m = kept_reps.shape[0]
    pairs = ordered_pairs(m)
    n_rel = params["initial.relation.w1"].shape[1]
    if not pairs:
        empty = ad.constant(np.zeros((0, n_rel), dtype=params.dtype))
        return pairs, empty, empty
    idx_a = [a for a, _ in pairs]
    idx_b = [b for _, b in pairs]
    rep_a = ad.gather_rows(kept_reps, idx_a)
    rep_b = ad.gather_rows(kept_reps, idx_b)
    features = ad.concat([rep_a, rep_b, ad.mul(rep_a, rep_b)], axis=1)
    hidden = ad.relu(ad.linear(features, params["initial.relation.w0"], params["initial.relation.b0"]))
    logits = ad.linear(hidden, params["initial.relation.w1"], params["initial.relation.b1"])
    return pairs, logits, ad.softmax(logits, axis=1)


def relation_adjacency(relation_probs: Tensor, pairs: list[tuple[int, int]], m: int, n_rel: int) -> list[Tensor]:
    """Dense [m x m] edge-weight matrix per relation type (zero diagonal)."""
    flat_idx = [a * m + b for a, b in pairs]
    full = ad.scatter_rows(relation_probs, flat_idx, m * m) if pairs else ad.constant(
        np.zeros((m * m, n_rel), dtype=relation_probs.dtype)
    )
    return [ad.reshape(ad.slice_cols(full, k, k + 1), (m, m)) for k in range(n_rel)]


def gcn_direction_messages(
    states: Tensor,
    adjacency: list[Tensor],
    params: ParameterStore,
    layer: int,
    direction: str,
) -> Tensor:
    """Edge-weighted sum of per-relation linear messages for one direction.

    Row i is sum_j sum_k w[i, j, k] * (W_k @ state_j + b_k), where w is the
    (possibly transposed) relation adjacency.
    """
    if direction not in ("fwd", "bwd"):
        raise ValueError(f"unknown GCN direction {direction!r}")
    total = None
    for k, adj in enumerate(adjacency):
        w = params[f"gcn.l{layer}.{direction}.k{k}.w"]
        b = params[f"gcn.l{layer}.{direction}.k{k}.b"]
        messages = ad.linear(states, w, b)
        weights = adj if direction == "fwd" else ad.transpose(adj)
        term = ad.matmul(weights, messages)
        total = term if total is None else ad.add(total, term)
    return total


def bigcn_forward(
    kept_reps: Tensor,
    relation_probs: Tensor,
    pairs: list[tuple[int, int]],
    params: ParameterStore,
    n_layers: int,
    detach_edges: bool = False,
) -> Tensor:
    """Bidirectional GCN over the initial span graph.

    States start at the span representations; each layer adds a residual
    update computed from forward- and backward-direction messages. With
    zero layers the input is returned unchanged. ``detach_edges`` blocks
    gradients from flowing through the relation edge weights.
    """
    m = kept_reps.shape[0]
    if n_layers == 0 or m == 0:
        return kept_reps
    n_rel = relation_probs.shape[1]
    edge_probs = ad.detach(relation_probs) if detach_edges else relation_probs
    adjacency = relation_adjacency(edge_probs, pairs, m, n_rel)
    h = kept_reps
    for layer in range(n_layers):
        fwd = gcn_direction_messages(h, adjacency, params, layer, "fwd")
        bwd = gcn_direction_messages(h, adjacency, params, layer, "bwd")
        mixed = ad.relu(ad.concat([fwd, bwd], axis=1))
        update = ad.linear(mixed, params[f"gcn.l{layer}.mix.w"], params[f"gcn.l{layer}.mix.b"])
        h = ad.add(h, update)
    return h
