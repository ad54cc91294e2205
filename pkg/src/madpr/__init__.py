"""Manifold-aware dense passage retrieval."""

from .embeddings import EmbeddingMatrix, Metric, load_embeddings, normalize_l2, write_embeddings
from .errors import (
    ConvergenceError,
    DisconnectedGraphError,
    FormatError,
    MadprError,
    StaleArtifactError,
    ValidationError,
)
from .knn_graph import Cost, ManifoldGraph, build_knn_graph, load_graph, save_graph
from .ranking import RankedList, attach_query, flat_rank, manifold_rank
from .spectral import SpectralEmbedding, spectral_embed

__version__ = "0.1.0"
