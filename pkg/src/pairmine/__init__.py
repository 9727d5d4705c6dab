"""pairmine: mine input/output training pairs from large text corpora.

A small labeled seed set supervises a two-stage cascade: a biencoder ranks
candidate pairs by a kNN-margin score over cosine similarities (recall
oriented), then a crossencoder re-ranks the survivors on pair-level
interaction features (precision oriented).
"""

__version__ = "0.1.0"
