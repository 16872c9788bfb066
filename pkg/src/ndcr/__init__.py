"""Neural divide-and-conquer reasoning head for compositional image retrieval."""

__version__ = "0.1.0"
