"""Multi-modal recommendation with a unified graph transformer.

Items carry an image and a text; a multi-way transformer encodes both, an
attentive gate fuses them, and a unified GNN propagates the fused features
together with ID embeddings over the user–item graph.
"""

from .errors import (
    ConfigurationError,
    ContractError,
    DataFormatError,
    DivergenceError,
    ReferentialIntegrityError,
    ReportError,
    ShapeError,
    UGTError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ContractError",
    "DataFormatError",
    "DivergenceError",
    "ReferentialIntegrityError",
    "ReportError",
    "ShapeError",
    "UGTError",
    "__version__",
]
