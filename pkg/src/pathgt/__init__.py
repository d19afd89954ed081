"""Pathway-aware graph transformer for binary cohort classification.

Per-gene mutation and copy-number profiles are conditioned onto gene
embeddings, pooled into pathway tokens by learned attention, and passed
through an edge-aware transformer over a pathway-overlap graph. The package
also ships the full cross-validation protocol and the gradient- and
attention-based interpretation stack.
"""

__version__ = "0.1.0"
