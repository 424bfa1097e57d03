"""Review-derived factor profiles with multi-factor attention on top of LightGCN."""

__version__ = "0.1.0"
