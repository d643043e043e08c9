"""Next-city trip recommendation: heuristic candidate pools reranked by an attention model."""

__version__ = "0.1.0"
