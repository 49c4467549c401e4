"""C2R: a graph classifier and a node-level rationalizer trained jointly,
with k-means environments, for out-of-distribution graph classification."""

__version__ = "0.1.0"
