"""Instruction-data selection by one-shot loss differencing.

The pipeline embeds every rendered instruction, assigns each sample its
most similar other sample, scores each response with and without that
neighbor as a one-shot example, and ranks samples by the drop in response
loss the example causes (MIWV). Samples whose responses become much easier
to predict given one relevant demonstration are the ones worth training on.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .dataset import (
    ALPACA_PROFILE,
    Dataset,
    InstructionSample,
    PromptText,
    TemplateProfile,
    load_dataset,
    render_instruction,
    render_one_shot_prompt,
)
from .embedding import (
    EmbeddingBackendDescriptor,
    EmbeddingMatrix,
    EmbeddingVector,
    TokenEmbeddingSequence,
    cosine_similarity,
    embed_corpus,
    mean_pool,
)
from .retrieval import (
    NeighborAssignment,
    NeighborMap,
    all_nearest_neighbors,
    nearest_neighbor_exact,
)
from .scoring import (
    LossValue,
    MiwvRecord,
    ScoredSample,
    TokenLogProb,
    compute_miwv,
    conditioned_response_loss,
    locate_response_span,
    response_loss,
    score_corpus,
    score_tokens,
)
from .selection import (
    Ranking,
    SelectionSubset,
    export_subset,
    rank,
    score_statistics,
    select_top_fraction,
)

__all__ = [
    "__version__",
    "ALPACA_PROFILE",
    "Dataset",
    "InstructionSample",
    "PromptText",
    "TemplateProfile",
    "load_dataset",
    "render_instruction",
    "render_one_shot_prompt",
    "EmbeddingBackendDescriptor",
    "EmbeddingMatrix",
    "EmbeddingVector",
    "TokenEmbeddingSequence",
    "cosine_similarity",
    "embed_corpus",
    "mean_pool",
    "NeighborAssignment",
    "NeighborMap",
    "all_nearest_neighbors",
    "nearest_neighbor_exact",
    "LossValue",
    "MiwvRecord",
    "ScoredSample",
    "TokenLogProb",
    "compute_miwv",
    "conditioned_response_loss",
    "locate_response_span",
    "response_loss",
    "score_corpus",
    "score_tokens",
    "Ranking",
    "SelectionSubset",
    "export_subset",
    "rank",
    "score_statistics",
    "select_top_fraction",
]
