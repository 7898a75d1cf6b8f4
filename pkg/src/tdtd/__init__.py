"""Top-down breadth-first tree generation, conditional reranking, a
sequential bracket baseline, and the PCFG-oracle evaluation pipeline."""

__version__ = "0.1.0"
