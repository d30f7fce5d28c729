"""Embedded entity linker: lexical candidate retrieval over a local KB, dense rerank."""

__version__ = "0.1.0"
