"""Model assembly: configuration, parameter initialization, the end-to-end
forward pass, and the scikit-learn style estimator wrapping it all.

The pipeline per document: embed tokens, encode spans, classify the initial
span graph, prune, run the bidirectional GCN, link KB candidates, build and
encode the background knowledge graph with the relational GCN, fuse span
and candidate states through sentinel attention, and classify the final
span graph.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from . import fusion as fusion_mod
from . import kgnn
from . import spangraph
from .autodiff import ParameterStore, Tensor
from .corpus import Document, Span, TaskSchema, enumerate_spans
from .encoder import EmbeddingProvider, embed_tokens, encode_spans
from .errors import ValidationError
from .kb import KnowledgeBase, KnowledgeGraph, build_kg, link_candidates
from .validation import check_config, check_documents, check_kb_dims


@dataclass
class ModelConfig:
    """Hyperparameters; dimensions are small by default for desk-scale runs."""

    d: int = 64  # span/hidden size
    d_tok: int = 32  # token embedding size (also used for definition encoding)
    d_len: int = 16  # span length feature size
    d_kb: int = 32  # KB pretrained embedding size
    max_span_length: int = 20
    pruning_ratio: float = 0.5
    gcn_layers: int = 2
    rgcn_layers: int = 2
    final_loss_weight: float = 2.0
    relation_loss_mode: str = "softmax_ce"
    lr_lower: float = 5e-5
    lr_upper: float = 2e-4
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    min_count: int = 1  # vocabulary frequency cutoff; rarer tokens become UNK
    position_encoding: bool = False
    detach_gcn_edges: bool = False
    grad_clip: float = 0.0  # 0 disables clipping
    dtype: str = "float32"

    def __post_init__(self):
        check_config(self)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def d_node(self) -> int:
        return self.d_kb + self.d_tok

    def to_json_obj(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        return cls(**obj)


@dataclass(frozen=True)
class VariantSpec:
    """Which pipeline stages an ablation variant runs."""

    use_bigcn: bool
    use_rgcn: bool
    use_knowledge: bool
    use_final: bool


VARIANTS: dict[str, VariantSpec] = {
    "full": VariantSpec(True, True, True, True),
    "sent_context_only": VariantSpec(False, False, False, False),
    "flat_attention": VariantSpec(False, False, True, True),
    "no_bigcn": VariantSpec(False, True, True, True),
    "no_rgcn": VariantSpec(True, False, True, True),
}


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # per-name stream: identical parameters initialize identically across
    # variants regardless of creation order
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_parameters(
    config: ModelConfig,
    schema: TaskSchema,
    kb: KnowledgeBase,
    vocab_size: int,
    variant: str = "full",
) -> ParameterStore:
    """Create every trainable tensor the chosen variant needs, with
    deterministic per-name initialization."""
    spec = VARIANTS[variant]
    store = ParameterStore(dtype=config.np_dtype)
    d, d_tok, d_len = config.d, config.d_tok, config.d_len
    n_ent, n_rel = schema.n_entity_types, schema.n_relation_types

    def matrix(name: str, fan_in: int, fan_out: int) -> None:
        store.add(name, _glorot(_param_rng(config.seed, name), fan_in, fan_out))

    def bias(name: str, width: int) -> None:
        store.add(name, np.zeros((1, width)))

    def embedding(name: str, rows: int, width: int, scale: float = 0.2) -> None:
        store.add(name, _param_rng(config.seed, name).normal(0.0, scale, size=(rows, width)))

    embedding("embed.tokens", vocab_size, d_tok)
    matrix("encoder.span_attn", d_tok, 1)
    embedding("encoder.span_length", config.max_span_length, d_len)
    span_in = 3 * d_tok + d_len
    matrix("encoder.span_ffnn.w0", span_in, d)
    bias("encoder.span_ffnn.b0", d)
    matrix("encoder.span_ffnn.w1", d, d)
    bias("encoder.span_ffnn.b1", d)

    matrix("initial.entity.w", d, n_ent)
    bias("initial.entity.b", n_ent)
    matrix("initial.relation.w0", 3 * d, d)
    bias("initial.relation.b0", d)
    matrix("initial.relation.w1", d, n_rel)
    bias("initial.relation.b1", n_rel)

    if spec.use_bigcn:
        for layer in range(config.gcn_layers):
            for k in range(n_rel):
                for direction in ("fwd", "bwd"):
                    matrix(f"gcn.l{layer}.{direction}.k{k}.w", d, d)
                    bias(f"gcn.l{layer}.{direction}.k{k}.b", d)
            matrix(f"gcn.l{layer}.mix.w", 2 * d, d)
            bias(f"gcn.l{layer}.mix.b", d)

    if spec.use_knowledge:
        d_node = config.d_node
        embedding("kg.type_embed", max(len(kb.semantic_types), 1), config.d_kb)
        if spec.use_rgcn:
            n_kb_rel = len(kb.relation_vocabulary)
            for layer in range(config.rgcn_layers):
                matrix(f"rgcn.l{layer}.self.w", d_node, d_node)
                for k in range(n_kb_rel):
                    matrix(f"rgcn.l{layer}.rel.k{k}.w", d_node, d_node)
        matrix("kg.project.w", d_node, d)
        bias("kg.project.b", d)
        matrix("fusion.sentinel.w", d, d)
        bias("fusion.sentinel.b", d)
        matrix("fusion.score.w0", 2 * d, d)
        bias("fusion.score.b0", d)
        matrix("fusion.score.w1", d, 1)
        bias("fusion.score.b1", 1)
        matrix("final.entity.w", d, n_ent)
        bias("final.entity.b", n_ent)
        matrix("final.relation.w0", 3 * d, d)
        bias("final.relation.b0", d)
        matrix("final.relation.w1", d, n_rel)
        bias("final.relation.b1", n_rel)

    return store


@dataclass
class Pipeline:
    """Everything needed to run documents through the model."""

    config: ModelConfig
    schema: TaskSchema
    kb: KnowledgeBase
    provider: EmbeddingProvider
    params: ParameterStore
    variant: str = "full"

    @property
    def variant_spec(self) -> VariantSpec:
        return VARIANTS[self.variant]


@dataclass
class DocResult:
    """Forward-pass outputs for one document."""

    doc: Document
    spans: list[Span]
    initial: spangraph.InitialPrediction | None
    kg: KnowledgeGraph | None = None
    final_entity_probs: Tensor | None = None
    final_relation_logits: Tensor | None = None
    final_relation_probs: Tensor | None = None
    attention: list[fusion_mod.SpanAttention] = field(default_factory=list)

    @property
    def kept_spans(self) -> list[Span]:
        if self.initial is None:
            return []
        return [self.spans[i] for i in self.initial.kept]


def run_document(pipeline: Pipeline, doc: Document) -> DocResult:
    """Full forward pass for one document under the pipeline's variant."""
    config, params = pipeline.config, pipeline.params
    spec = pipeline.variant_spec
    spans = enumerate_spans(doc.n_tokens, config.max_span_length)
    if not spans:
        return DocResult(doc=doc, spans=[], initial=None)

    x = embed_tokens(doc, pipeline.provider, params["embed.tokens"], config.position_encoding)
    span_reps = encode_spans(x, spans, params)
    _, entity_probs = spangraph.classify_entities_initial(span_reps, params)
    kept = spangraph.prune_spans(entity_probs.data[:, 0], spans, config.pruning_ratio, doc.n_tokens)
    kept_reps = ad.gather_rows(span_reps, kept)
    pairs, rel_logits, rel_probs = spangraph.classify_relations_initial(kept_reps, params)
    initial = spangraph.InitialPrediction(entity_probs, kept, pairs, rel_logits, rel_probs)
    result = DocResult(doc=doc, spans=spans, initial=initial)

    if not spec.use_knowledge:
        return result

    h = (
        spangraph.bigcn_forward(kept_reps, rel_probs, pairs, params, config.gcn_layers, config.detach_gcn_edges)
        if spec.use_bigcn
        else kept_reps
    )
    candidate_map = link_candidates(doc, spans, pipeline.kb)
    kg = build_kg(candidate_map, pipeline.kb)
    v0 = kgnn.init_node_features(kg, pipeline.kb, pipeline.provider, params)
    v = kgnn.rgcn_forward(kg, v0, params, config.rgcn_layers) if spec.use_rgcn else v0
    node_states = kgnn.project_nodes(v, params)
    per_span_candidates = [kg.candidate_map.get(si, []) for si in kept]
    fused, attention = fusion_mod.fuse_spans(h, per_span_candidates, node_states, params)
    _, ent_probs, final_pairs, final_rel_logits, final_rel_probs = fusion_mod.classify_final(fused, params)
    if final_pairs != pairs:
        raise ValidationError("final and initial pair orders diverged")

    result.kg = kg
    result.final_entity_probs = ent_probs
    result.final_relation_logits = final_rel_logits
    result.final_relation_probs = final_rel_probs
    result.attention = attention
    return result


def run_documents(pipeline: Pipeline, docs: Sequence[Document], threads: int = 1) -> list[DocResult]:
    """Forward passes with frozen parameters; optionally thread-parallel."""
    if threads <= 1 or len(docs) <= 1:
        return [run_document(pipeline, doc) for doc in docs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda d: run_document(pipeline, d), docs))


class KeciExtractor(BaseEstimator):
    """Joint entity and relation extractor with background-KB fusion.

    Follows the scikit-learn estimator protocol: hyperparameters are
    constructor arguments (``get_params``/``set_params``/``clone`` work as
    usual), ``fit`` takes a list of gold-annotated ``Document`` objects, and
    ``predict`` returns a ``PredictedGraph`` per document.
    """

    def __init__(
        self,
        schema: TaskSchema | None = None,
        kb: KnowledgeBase | None = None,
        embedding_provider: EmbeddingProvider | None = None,
        variant: str = "full",
        d: int = 64,
        d_tok: int = 32,
        d_len: int = 16,
        d_kb: int = 32,
        max_span_length: int = 20,
        pruning_ratio: float = 0.5,
        gcn_layers: int = 2,
        rgcn_layers: int = 2,
        final_loss_weight: float = 2.0,
        relation_loss_mode: str = "softmax_ce",
        lr_lower: float = 5e-5,
        lr_upper: float = 2e-4,
        batch_size: int = 32,
        epochs: int = 50,
        seed: int = 0,
        min_count: int = 1,
        position_encoding: bool = False,
        detach_gcn_edges: bool = False,
        grad_clip: float = 0.0,
        dtype: str = "float32",
    ):
        self.schema = schema
        self.kb = kb
        self.embedding_provider = embedding_provider
        self.variant = variant
        self.d = d
        self.d_tok = d_tok
        self.d_len = d_len
        self.d_kb = d_kb
        self.max_span_length = max_span_length
        self.pruning_ratio = pruning_ratio
        self.gcn_layers = gcn_layers
        self.rgcn_layers = rgcn_layers
        self.final_loss_weight = final_loss_weight
        self.relation_loss_mode = relation_loss_mode
        self.lr_lower = lr_lower
        self.lr_upper = lr_upper
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.min_count = min_count
        self.position_encoding = position_encoding
        self.detach_gcn_edges = detach_gcn_edges
        self.grad_clip = grad_clip
        self.dtype = dtype

    def _config(self) -> ModelConfig:
        fields = {f: getattr(self, f) for f in ModelConfig.__dataclass_fields__}
        return ModelConfig(**fields)

    def fit(self, X: Sequence[Document], y=None, dev: Sequence[Document] | None = None, progress=None):
        """Train on gold-annotated documents. ``y`` is unused (gold lives on
        the documents); ``dev`` enables best-epoch checkpoint selection."""
        from .train import fit as train_fit

        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; pick one of {sorted(VARIANTS)}")
        schema = self.schema if self.schema is not None else infer_schema(X)
        kb = self.kb if self.kb is not None else KnowledgeBase.empty()
        config = self._config()
        check_documents(X, schema)
        if dev:
            check_documents(dev, schema)
        check_kb_dims(kb, config)
        outcome = train_fit(
            config,
            list(X),
            list(dev) if dev else [],
            kb,
            schema,
            self.variant,
            progress=progress,
            provider=self.embedding_provider,
        )
        self.pipeline_ = outcome.pipeline
        self.history_ = outcome.history
        self.best_epoch_ = outcome.best_epoch
        return self

    def _require_fitted(self) -> Pipeline:
        pipeline = getattr(self, "pipeline_", None)
        if pipeline is None:
            raise NotFittedError("this KeciExtractor instance is not fitted yet; call fit first")
        return pipeline

    def predict(self, X: Sequence[Document], threads: int = 1):
        """Decode a PredictedGraph for each document."""
        from .evaluate import decode_graph

        pipeline = self._require_fitted()
        results = run_documents(pipeline, X, threads=threads)
        return [decode_graph(r, pipeline.schema, pipeline.config) for r in results]

    def forward(self, X: Sequence[Document], threads: int = 1) -> list[DocResult]:
        """Raw forward-pass results (distributions, attention weights)."""
        return run_documents(self._require_fitted(), X, threads=threads)

    def score(self, X: Sequence[Document], y=None) -> float:
        """Mean of entity and relation micro-F1 on gold-annotated documents."""
        from .evaluate import score_entities, score_relations

        preds = self.predict(X)
        ent = score_entities(preds, list(X), mode="micro")
        rel = score_relations(preds, list(X), mode="micro")
        return (ent.f1 + rel.f1) / 2.0

    def save(self, path) -> None:
        from .train import save_checkpoint

        save_checkpoint(self._require_fitted(), path)

    @classmethod
    def from_checkpoint(cls, path, kb: KnowledgeBase | None = None) -> "KeciExtractor":
        from .train import load_checkpoint

        pipeline = load_checkpoint(path, kb=kb)
        est = cls(schema=pipeline.schema, kb=pipeline.kb, variant=pipeline.variant)
        for name in ModelConfig.__dataclass_fields__:
            setattr(est, name, getattr(pipeline.config, name))
        est.pipeline_ = pipeline
        est.history_ = []
        est.best_epoch_ = None
        return est


def infer_schema(docs: Sequence[Document]) -> TaskSchema:
    """Schema from the gold annotations of a document collection."""
    etypes = sorted({e.type for doc in docs for e in doc.gold_entities})
    rtypes = sorted({r.type for doc in docs for r in doc.gold_relations})
    if not etypes:
        raise ValidationError("cannot infer a schema: no gold entities present")
    if not rtypes:
        rtypes = ["REL"]
    return TaskSchema.from_names(etypes, rtypes)
