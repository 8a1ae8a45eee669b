"""Online cross-layer structure distillation between peer GNN students."""

__version__ = "0.1.0"
