"""Joint loss, two-group Adam optimization, the training loop, and
checkpoint persistence.

The total loss adds the initial span-graph terms to the final span-graph
terms, with the final terms up-weighted: (l1e + l1r) + w * (l2e + l2r).
Entity terms are cross-entropy; relation terms use either softmax
cross-entropy over the relation inventory (default, matching the
distributions that weight the span-graph edges) or per-type sigmoid +
binary cross-entropy against multi-hot targets.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckResult, ParameterStore, Tape, Tensor, finite_difference_check
from .corpus import Document, Span, TaskSchema
from .encoder import EmbeddingProvider
from .errors import FormatError, ValidationError
from .kb import KnowledgeBase
from .model import DocResult, ModelConfig, Pipeline, init_parameters, run_document, run_documents

logger = logging.getLogger("keci")

CHECKPOINT_MAGIC = b"KECI"
CHECKPOINT_VERSION = 1

# The embedding table is the stand-in for a pretrained lower encoder and
# trains at the lower learning rate; everything else is an upper layer.
LOWER_GROUP = ("embed.tokens",)


@dataclass
class LossReport:
    """The four loss components and their weighted total."""

    l1e: float
    l1r: float
    l2e: float
    l2r: float
    total: float

    @classmethod
    def from_components(cls, l1e: float, l1r: float, l2e: float, l2r: float, weight: float = 2.0) -> "LossReport":
        return cls(l1e, l1r, l2e, l2r, (l1e + l1r) + weight * (l2e + l2r))


def entity_targets(doc: Document, spans: list[Span], schema: TaskSchema) -> list[int]:
    """Gold entity-type index per span; unannotated spans map to the
    non-entity class. The first gold annotation wins for duplicated spans."""
    by_span: dict[tuple[int, int], int] = {}
    for ent in doc.gold_entities:
        by_span.setdefault((ent.span.start, ent.span.end), schema.entity_index(ent.type))
    return [by_span.get((s.start, s.end), 0) for s in spans]


def relation_gold_map(doc: Document, schema: TaskSchema) -> dict[tuple[tuple[int, int], tuple[int, int]], list[int]]:
    """Ordered (head span, tail span) -> gold relation-type indices."""
    out: dict[tuple[tuple[int, int], tuple[int, int]], list[int]] = {}
    for rel in doc.gold_relations:
        head = doc.gold_entities[rel.head].span
        tail = doc.gold_entities[rel.tail].span
        key = ((head.start, head.end), (tail.start, tail.end))
        out.setdefault(key, []).append(schema.relation_index(rel.type))
    return out


def _relation_targets(result: DocResult, schema: TaskSchema) -> tuple[list[int], np.ndarray]:
    """(softmax class targets, multi-hot targets) for the kept ordered pairs."""
    initial = result.initial
    gold = relation_gold_map(result.doc, schema)
    kept_spans = result.kept_spans
    classes = []
    multihot = np.zeros((len(initial.pairs), schema.n_relation_types))
    for p, (a, b) in enumerate(initial.pairs):
        sa, sb = kept_spans[a], kept_spans[b]
        types = gold.get(((sa.start, sa.end), (sb.start, sb.end)), [])
        classes.append(types[0] if types else 0)
        if types:
            for t in types:
                multihot[p, t] = 1.0
        else:
            multihot[p, 0] = 1.0
    return classes, multihot


def compute_loss(result: DocResult, schema: TaskSchema, config: ModelConfig) -> tuple[LossReport, Tensor | None]:
    """Loss report plus the differentiable total (None for empty documents)."""
    zero = ad.constant(np.asarray(0.0, dtype=config.np_dtype))
    if result.initial is None:
        return LossReport.from_components(0.0, 0.0, 0.0, 0.0, config.final_loss_weight), None
    initial = result.initial
    span_targets = entity_targets(result.doc, result.spans, schema)
    l1e = ad.cross_entropy(initial.entity_probs, span_targets)

    rel_classes, rel_multihot = _relation_targets(result, schema)
    use_bce = config.relation_loss_mode == "sigmoid_bce"

    def relation_loss(logits: Tensor, probs: Tensor) -> Tensor:
        if not initial.pairs:
            return zero
        if use_bce:
            return ad.binary_cross_entropy(ad.sigmoid(logits), ad.constant(rel_multihot.astype(config.np_dtype)))
        return ad.cross_entropy(probs, rel_classes)

    l1r = relation_loss(initial.relation_logits, initial.relation_probs)

    if result.final_entity_probs is not None:
        kept_targets = [span_targets[i] for i in initial.kept]
        l2e = ad.cross_entropy(result.final_entity_probs, kept_targets)
        l2r = relation_loss(result.final_relation_logits, result.final_relation_probs)
    else:
        l2e = zero
        l2r = zero

    total = ad.add(ad.add(l1e, l1r), ad.scale(ad.add(l2e, l2r), config.final_loss_weight))
    report = LossReport.from_components(l1e.item(), l1r.item(), l2e.item(), l2r.item(), config.final_loss_weight)
    return report, total


class Adam:
    """Adam with two learning-rate groups and deterministic update order.

    Parameters without a gradient are skipped (counted in ``skipped``);
    optional global-norm gradient clipping.
    """

    def __init__(
        self,
        store: ParameterStore,
        lr_lower: float,
        lr_upper: float,
        lower_names=LOWER_GROUP,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        grad_clip: float = 0.0,
    ):
        self.store = store
        self.lr_lower = lr_lower
        self.lr_upper = lr_upper
        self.lower_names = set(lower_names)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.grad_clip = grad_clip
        self.t = 0
        self.skipped = 0
        self._m = {name: np.zeros_like(t.data) for name, t in store.items()}
        self._v = {name: np.zeros_like(t.data) for name, t in store.items()}

    def step(self) -> None:
        self.t += 1
        clip_scale = 1.0
        if self.grad_clip > 0:
            sq = sum(float((p.grad ** 2).sum()) for _, p in self.store.items() if p.grad is not None)
            norm = np.sqrt(sq)
            if norm > self.grad_clip:
                clip_scale = self.grad_clip / norm
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.store.items():
            if p.grad is None:
                if p.requires_grad:  # frozen tensors are not "missing" grads
                    self.skipped += 1
                continue
            g = p.grad * clip_scale
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            lr = self.lr_lower if name in self.lower_names else self.lr_upper
            p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.data.dtype, copy=False)
        self.store.zero_grads()


@dataclass
class FitOutcome:
    pipeline: Pipeline
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None


def fit(
    config: ModelConfig,
    train_docs: list[Document],
    dev_docs: list[Document],
    kb: KnowledgeBase,
    schema: TaskSchema,
    variant: str = "full",
    progress=None,
    provider: EmbeddingProvider | None = None,
) -> FitOutcome:
    """Train the model; returns the best-dev checkpoint (final parameters
    when no dev set is given) plus the per-epoch metric history.

    ``provider`` overrides the default vocabulary built from the training
    documents, e.g. one loaded from a pretrained embedding file; a frozen
    provider keeps its table fixed during training.
    """
    from .evaluate import decode_graph, score_entities, score_relations

    if not train_docs:
        raise ValueError("training set is empty")
    if provider is None:
        provider = EmbeddingProvider.build(train_docs, config.d_tok, config.min_count)
    elif provider.dim != config.d_tok:
        raise ValidationError(f"embedding provider dim {provider.dim} != config.d_tok {config.d_tok}")
    params = init_parameters(config, schema, kb, provider.vocab_size, variant)
    if provider.pretrained is not None:
        table = params["embed.tokens"]
        if provider.pretrained.shape != table.shape:
            raise ValidationError(
                f"pretrained table shape {provider.pretrained.shape} != {table.shape}"
            )
        table.data = provider.pretrained.astype(params.dtype).copy()
    if not provider.trainable:
        params["embed.tokens"].requires_grad = False
    pipeline = Pipeline(config=config, schema=schema, kb=kb, provider=provider, params=params, variant=variant)
    optimizer = Adam(params, config.lr_lower, config.lr_upper, grad_clip=config.grad_clip)
    rng = np.random.default_rng(config.seed)

    history: list[dict] = []
    best_epoch: int | None = None
    best_score = -1.0
    best_values: dict[str, np.ndarray] | None = None

    for epoch in range(config.epochs):
        order = rng.permutation(len(train_docs))
        reports: list[LossReport] = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            params.zero_grads()
            n_live = 0
            for doc_idx in batch:
                doc = train_docs[int(doc_idx)]
                with Tape():
                    result = run_document(pipeline, doc)
                    report, total = compute_loss(result, schema, config)
                    if total is not None:
                        ad.backward(ad.scale(total, 1.0 / len(batch)))
                        n_live += 1
                reports.append(report)
            if n_live:
                optimizer.step()

        record = {
            "epoch": epoch,
            "loss": float(np.mean([r.total for r in reports])) if reports else 0.0,
            "l1e": float(np.mean([r.l1e for r in reports])) if reports else 0.0,
            "l1r": float(np.mean([r.l1r for r in reports])) if reports else 0.0,
            "l2e": float(np.mean([r.l2e for r in reports])) if reports else 0.0,
            "l2r": float(np.mean([r.l2r for r in reports])) if reports else 0.0,
            "dev_entity_f1": None,
            "dev_relation_f1": None,
        }
        if dev_docs:
            results = run_documents(pipeline, dev_docs)
            preds = [decode_graph(r, schema, config) for r in results]
            ent = score_entities(preds, dev_docs, mode="micro")
            rel = score_relations(preds, dev_docs, mode="micro")
            record["dev_entity_f1"] = ent.f1
            record["dev_relation_f1"] = rel.f1
            score = (ent.f1 + rel.f1) / 2.0
            if score > best_score:
                best_score = score
                best_epoch = epoch
                best_values = params.snapshot()
        history.append(record)
        if progress is not None:
            progress(record)
        logger.debug("epoch %d loss %.4f", epoch, record["loss"])

    if best_values is not None:
        params.load_values(best_values)
    return FitOutcome(pipeline=pipeline, history=history, best_epoch=best_epoch)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(pipeline: Pipeline, path) -> None:
    """Binary checkpoint: magic, version, a JSON header (config, schema,
    vocabulary, variant, KB vocabularies), then one record per parameter."""
    vocab_ordered = [t for t, _ in sorted(pipeline.provider.vocab.items(), key=lambda kv: kv[1])]
    header = {
        "config": pipeline.config.to_json_obj(),
        "variant": pipeline.variant,
        "entity_types": pipeline.schema.entity_types,
        "relation_types": pipeline.schema.relation_types,
        "vocab": vocab_ordered,
        "embeddings_trainable": pipeline.provider.trainable,
        "kb_semantic_types": pipeline.kb.semantic_types,
        "kb_relations": pipeline.kb.kb_relations,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, tensor in pipeline.params.items():
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<I", tensor.ndim))
            for dim in tensor.shape:
                f.write(struct.pack("<I", dim))
            f.write(tensor.data.astype("<f4").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path, kb: KnowledgeBase | None = None, expected_schema: TaskSchema | None = None) -> Pipeline:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        try:
            header = json.loads(_read_exact(f, blob_len, "header").decode("utf-8"))
        except json.JSONDecodeError as e:
            raise FormatError(f"corrupt checkpoint header: {e}") from e

        config = ModelConfig.from_json_obj(header["config"])
        schema = TaskSchema(list(header["entity_types"]), list(header["relation_types"]))
        if expected_schema is not None and (
            expected_schema.entity_types != schema.entity_types
            or expected_schema.relation_types != schema.relation_types
        ):
            raise ValidationError("checkpoint schema does not match the expected schema")
        variant = header["variant"]
        needs_kb = bool(header["kb_semantic_types"]) or bool(header["kb_relations"])
        if kb is None:
            if needs_kb:
                raise ValidationError("checkpoint was trained with a knowledge base; one must be provided")
            kb = KnowledgeBase.empty()
        elif kb.semantic_types != header["kb_semantic_types"] or kb.kb_relations != header["kb_relations"]:
            raise ValidationError("provided KB vocabularies do not match the checkpoint")

        vocab = {t: i for i, t in enumerate(header["vocab"])}
        provider = EmbeddingProvider(
            vocab=vocab, dim=config.d_tok, trainable=bool(header.get("embeddings_trainable", True))
        )

        values: dict[str, np.ndarray] = {}
        while True:
            raw = f.read(4)
            if not raw:
                break
            if len(raw) != 4:
                raise FormatError("truncated checkpoint while reading record header")
            (name_len,) = struct.unpack("<I", raw)
            name = _read_exact(f, name_len, "parameter name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(_read_exact(f, 4 * count, f"values of {name}"), dtype="<f4").reshape(dims)
            values[name] = data.astype(config.np_dtype)

    params = init_parameters(config, schema, kb, provider.vocab_size, variant)
    params.load_values(values)
    if not provider.trainable:
        params["embed.tokens"].requires_grad = False
    return Pipeline(config=config, schema=schema, kb=kb, provider=provider, params=params, variant=variant)


# ---------------------------------------------------------------------------
# gradient checking over the whole pipeline
# ---------------------------------------------------------------------------


def gradcheck_config() -> ModelConfig:
    """Tiny float64 configuration so the finite-difference sweep stays fast."""
    return ModelConfig(
        d=6,
        d_tok=5,
        d_len=3,
        d_kb=4,
        max_span_length=4,
        gcn_layers=1,
        rgcn_layers=1,
        dtype="float64",
    )


def gradient_check_pipeline(seed: int = 7, config: ModelConfig | None = None, eps: float = 1e-5) -> GradCheckResult:
    """Finite-difference check of the full pipeline loss on a two-sentence
    toy batch with KB candidates, exercising every stage end to end."""
    from .toydata import ToySpec, generate_toy

    if config is None:
        config = gradcheck_config()
    if config.dtype != "float64":
        raise ValidationError("gradient checking requires a float64 config")
    spec = ToySpec(
        entity_types=["PROTEIN", "CHEMICAL"],
        relation_rules=[("CHEMICAL", "BINDS", "PROTEIN")],
        sentences=2,
        ambiguity_rate=1.0,
        distractors_per_mention=1,
        kb_embedding_dim=config.d_kb,
    )
    train_docs, _, kb, schema = generate_toy(spec, seed)
    provider = EmbeddingProvider.build(train_docs, config.d_tok, config.min_count)
    params = init_parameters(config, schema, kb, provider.vocab_size, variant="full")
    pipeline = Pipeline(config=config, schema=schema, kb=kb, provider=provider, params=params, variant="full")

    def loss_fn() -> Tensor:
        total = None
        for doc in train_docs:
            result = run_document(pipeline, doc)
            _, doc_total = compute_loss(result, schema, config)
            total = doc_total if total is None else ad.add(total, doc_total)
        return ad.scale(total, 1.0 / len(train_docs))

    return finite_difference_check(loss_fn, params, eps=eps)
