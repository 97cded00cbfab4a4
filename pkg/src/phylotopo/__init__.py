"""Learnable topological features for phylogenetic inference."""

__version__ = "0.1.0"

from .backend import ACTIVE_BACKEND
from .trees import (
    TaxaSet,
    TreeTopology,
    TreeError,
    parse_newick,
    serialize_newick,
    enumerate_unrooted,
    splits_of,
)
from .embedding import (
    one_hot_tips,
    embed_two_pass,
    embed_dense,
    dirichlet_energy,
    reconstruct_topology,
)

__all__ = [
    "ACTIVE_BACKEND",
    "TaxaSet",
    "TreeTopology",
    "TreeError",
    "parse_newick",
    "serialize_newick",
    "enumerate_unrooted",
    "splits_of",
    "one_hot_tips",
    "embed_two_pass",
    "embed_dense",
    "dirichlet_energy",
    "reconstruct_topology",
    "__version__",
]
