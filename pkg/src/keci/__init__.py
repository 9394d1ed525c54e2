"""Span-graph joint entity and relation extraction with background-KB fusion.

The main entry point is :class:`KeciExtractor`, a scikit-learn style
estimator over :class:`Document` lists. Lower-level building blocks
(the autodiff engine, corpus utilities, KB linking, scoring) are exposed
for direct use.
"""

from .autodiff import (
    GradCheckResult,
    ParameterStore,
    Tape,
    Tensor,
    backward,
    finite_difference_check,
)
from .corpus import (
    Document,
    GoldEntity,
    GoldRelation,
    NON_ENTITY,
    NON_RELATION,
    Span,
    TaskSchema,
    enumerate_spans,
    kfold_split,
    load_dataset,
    save_dataset,
    tokenize,
)
from .errors import ContractError, DimensionError, FormatError, KeciError, ValidationError
from .evaluate import (
    PRF,
    PredictedGraph,
    attention_report,
    decode_graph,
    metrics_json,
    run_ablation,
    score_entities,
    score_relations,
)
from .kb import KnowledgeBase, KnowledgeGraph, build_kg, link_candidates, load_kb
from .model import KeciExtractor, ModelConfig, Pipeline, VARIANTS, run_document, run_documents
from .toydata import ToySpec, generate_toy, write_toy_files
from .train import (
    Adam,
    LossReport,
    compute_loss,
    fit,
    gradient_check_pipeline,
    load_checkpoint,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "ContractError",
    "DimensionError",
    "Document",
    "FormatError",
    "GoldEntity",
    "GoldRelation",
    "GradCheckResult",
    "KeciError",
    "KeciExtractor",
    "KnowledgeBase",
    "KnowledgeGraph",
    "LossReport",
    "ModelConfig",
    "NON_ENTITY",
    "NON_RELATION",
    "PRF",
    "ParameterStore",
    "Pipeline",
    "PredictedGraph",
    "Span",
    "Tape",
    "TaskSchema",
    "Tensor",
    "ToySpec",
    "VARIANTS",
    "ValidationError",
    "attention_report",
    "backward",
    "build_kg",
    "compute_loss",
    "decode_graph",
    "enumerate_spans",
    "finite_difference_check",
    "fit",
    "generate_toy",
    "gradient_check_pipeline",
    "kfold_split",
    "link_candidates",
    "load_checkpoint",
    "load_dataset",
    "load_kb",
    "metrics_json",
    "run_ablation",
    "run_document",
    "run_documents",
    "save_checkpoint",
    "save_dataset",
    "score_entities",
    "score_relations",
    "tokenize",
    "write_toy_files",
]
