"""Relational GCN over the background knowledge graph, plus the projection
of node states down to the span-representation dimension."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .encoder import EmbeddingProvider, embed_text
from .kb import ENTITY_NODE, KnowledgeBase, KnowledgeGraph


def init_node_features(
    kg: KnowledgeGraph,
    kb: KnowledgeBase,
    provider: EmbeddingProvider,
    params: ParameterStore,
) -> Tensor:
    """Initial node states, [n_nodes x (d_kb + d_def)].

    Entity nodes concatenate the entity's pretrained embedding with an
    encoding of its definition text (zeros when the definition is empty).
    Type nodes use a learned per-type embedding concatenated with an
    encoding of the type name.
    """
    table = params["embed.tokens"]
    type_embed = params["kg.type_embed"]
    d_kb = type_embed.shape[1]
    rows = []
    for node in kg.nodes:
        if node.kind == ENTITY_NODE:
            ent = kb.entity_by_id(node.ref)
            left = ad.constant(ent.embedding.reshape(1, -1).astype(params.dtype))
            if left.shape[1] != d_kb:
                raise ValueError(f"KB embedding dim {left.shape[1]} != configured d_kb {d_kb}")
            right = embed_text(ent.definition, provider, table)
        else:
            left = ad.gather_rows(type_embed, [kb.semantic_types.index(node.ref)])
            right = embed_text(node.ref, provider, table)
        rows.append(ad.concat([left, right], axis=1))
    if not rows:
        return ad.constant(np.zeros((0, d_kb + provider.dim), dtype=params.dtype))
    return ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]


def _normalized_adjacency(kg: KnowledgeGraph, n_rel: int, dtype) -> list[np.ndarray]:
    """Per-relation [n x n] matrices with entry (i, j) = 1/|N_i^k| for each
    edge j -> i under relation k; node i aggregates from its in-neighbors."""
    n = kg.n_nodes
    mats = [np.zeros((n, n), dtype=dtype) for _ in range(n_rel)]
    indeg = np.zeros((n, n_rel), dtype=np.int64)
    for src, k, dst in kg.edges:
        indeg[dst, k] += 1
    for src, k, dst in kg.edges:
        mats[k][dst, src] += 1.0 / indeg[dst, k]
    return mats


def rgcn_forward(kg: KnowledgeGraph, node_states: Tensor, params: ParameterStore, n_layers: int) -> Tensor:
    """Relational GCN update: per layer, each node combines a self term with
    per-relation neighbor sums normalized by the neighbor count, then ReLU.
    All layers keep the input dimension (square weight matrices)."""
    if n_layers == 0 or kg.n_nodes == 0:
        return node_states
    n_rel = len(kg.relation_names)
    adjacency = [ad.constant(a) for a in _normalized_adjacency(kg, n_rel, params.dtype)]
    v = node_states
    for layer in range(n_layers):
        total = ad.matmul(v, params[f"rgcn.l{layer}.self.w"])
        for k in range(n_rel):
            term = ad.matmul(adjacency[k], ad.matmul(v, params[f"rgcn.l{layer}.rel.k{k}.w"]))
            total = ad.add(total, term)
        v = ad.relu(total)
    return v


def project_nodes(node_states: Tensor, params: ParameterStore) -> Tensor:
    """Linear map of node states to the span dimension, [n_nodes x d]."""
    return ad.linear(node_states, params["kg.project.w"], params["kg.project.b"])
