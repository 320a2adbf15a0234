"""Blockwise masked video autoencoding lab.

Trains a tubelet-tokenized video transformer under gradient-isolated
blockwise self-supervision and under matched end-to-end training, then
compares the per-block representations with linear probes, retrieval mAP,
reconstruction error, CKA, token-similarity, and occlusion diagnostics.
"""

__version__ = "0.1.0"
