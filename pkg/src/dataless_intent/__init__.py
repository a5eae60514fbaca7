"""Dataless intent classification over sentence embeddings.

Intent classes are represented by short declarative descriptions; an
utterance is classified by cosine nearest neighbour, optionally after adding
the embeddings of a paraphrase and of an object-masked variant of the
utterance.
"""

__version__ = "0.1.0"

from .augment import AugmentedUtterance, DepTree, DepToken, mask_tree, masking_coverage, parse_conllu
from .classifier import DatalessIntentClassifier, Prediction, PrototypeSet, RunConfig, build_prototypes
from .corpus import (
    IntentClass,
    IntentSchema,
    LabeledUtterance,
    description_stats,
    load_dataset,
    load_schema,
    tokenize_label,
    validate_description,
)
from .embedding import EmbeddingCache, HashingEmbedder, HTTPEmbedder, cosine, embed_all
from .evaluate import class_similarity_stats, run_ablation, score, topk_recall
from .overlap import OverlapMatrix, build_overlap_matrix, overlaps, top_k_classes

__all__ = [
    "AugmentedUtterance",
    "DatalessIntentClassifier",
    "DepToken",
    "DepTree",
    "EmbeddingCache",
    "HTTPEmbedder",
    "HashingEmbedder",
    "IntentClass",
    "IntentSchema",
    "LabeledUtterance",
    "OverlapMatrix",
    "Prediction",
    "PrototypeSet",
    "RunConfig",
    "build_overlap_matrix",
    "build_prototypes",
    "class_similarity_stats",
    "cosine",
    "description_stats",
    "embed_all",
    "load_dataset",
    "load_schema",
    "mask_tree",
    "masking_coverage",
    "overlaps",
    "parse_conllu",
    "run_ablation",
    "score",
    "tokenize_label",
    "top_k_classes",
    "topk_recall",
    "validate_description",
]
