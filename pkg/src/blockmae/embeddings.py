"""Maskless extraction of block-boundary representations and their file format.

For diagnostics the encoder runs on the full token sequence (no mask pattern
is drawn); each block's token outputs h_k are captured in a single forward
pass and mean-pooled over tokens into clip vectors z_k. Stacking the z_k of
all N clips gives X_k (N x D). Token tensors H_k are only kept on request --
CPS and occlusion probing need them, the pooled metrics do not.

Dump format (little-endian):
    magic 'BWEM' | u32 version | u64 N | u32 D | u32 K | u32 flags |
    u32 n_tokens | X_1..X_K as f32 (N*D each) |
    [H_1..H_K as f32 (N*n_tokens*D each), if flags bit 0] |
    u64 metadata length | metadata JSON (utf-8) | u64 checksum
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .data import _jsonify
from .tokenizer import TokenGrid, tubelet_tokenize
from .util import checksum64, stable_digest

_MAGIC = b"BWEM"
_VERSION = 1
_FLAG_TOKENS = 1


class EmbeddingIOError(RuntimeError):
    pass


@dataclass
class EmbeddingSet:
    X: list            # K arrays, each (N, D) float32: pooled clip vectors
    H: list            # K arrays (N, n_tokens, D) float32, or None
    meta: dict

    @property
    def K(self):
        return len(self.X)

    @property
    def n_clips(self):
        return self.X[0].shape[0]

    @property
    def dim(self):
        return self.X[0].shape[1]


def extract(model, dataset, keep_tokens=False, batch_size=32):
    """One maskless forward per clip; clip order is the dataset's order.

    Pooling happens on h_k exactly as the encoder produces it, i.e. for the
    final block after its output LayerNorm. The model is read-only here,
    enforced by comparing parameter digests before and after.
    """
    shape = dataset.clips[0].frames.shape
    grid = TokenGrid.for_clip(*shape[:3], model.config.tubelet, channels=shape[3])
    if grid != model.grid:
        raise ValueError(
            f"dataset token grid {grid} does not match model grid {model.grid}")

    digest_before = model.params_digest()
    K = model.config.K
    xs = [[] for _ in range(K)]
    hs_out = [[] for _ in range(K)] if keep_tokens else None
    n = len(dataset.clips)
    for lo in range(0, n, batch_size):
        clips = dataset.clips[lo:lo + batch_size]
        toks = np.stack([tubelet_tokenize(c.frames, grid)[0] for c in clips])
        hs = model.forward_full(toks)
        for k in range(K):
            h = hs[k].data
            xs[k].append(h.mean(axis=1, dtype=np.float64).astype(np.float32))
            if keep_tokens:
                hs_out[k].append(h.copy())
    if model.params_digest() != digest_before:
        raise RuntimeError("extraction mutated model parameters")

    X = [np.concatenate(parts, axis=0) for parts in xs]
    H = [np.concatenate(parts, axis=0) for parts in hs_out] if keep_tokens else None
    meta = {
        "checkpoint_id": digest_before,
        "dataset_id": stable_digest(
            json.dumps(_jsonify(dataset.spec), sort_keys=True)).hex(),
        "K": K, "D": X[0].shape[1], "N": n, "n_tokens": grid.total_tokens,
        "pooling": "token mean; final block pooled after its output layernorm",
        "model_config": model.config.to_dict(),
        "decoder_layout": model.decoder_layout,
        "labels": _jsonify({name: [c.labels[name] for c in dataset.clips]
                            for name in dataset.clips[0].labels}),
        "folds": {name: np.asarray(f).tolist()
                  for name, f in dataset.folds.items()},
    }
    return EmbeddingSet(X=X, H=H, meta=meta)


def save_embeddings(path, emb, force=False):
    from pathlib import Path
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass force to overwrite")
    N, D, K = emb.n_clips, emb.dim, emb.K
    flags = _FLAG_TOKENS if emb.H is not None else 0
    n_tokens = emb.H[0].shape[1] if emb.H is not None else int(
        emb.meta.get("n_tokens", 0))

    parts = [_MAGIC, struct.pack("<IQIIII", _VERSION, N, D, K, flags, n_tokens)]
    for X in emb.X:
        if X.shape != (N, D):
            raise ValueError(f"pooled matrix shape {X.shape}, expected {(N, D)}")
        parts.append(np.ascontiguousarray(X, dtype="<f4").tobytes())
    if emb.H is not None:
        for H in emb.H:
            if H.shape != (N, n_tokens, D):
                raise ValueError(
                    f"token tensor shape {H.shape}, expected {(N, n_tokens, D)}")
            parts.append(np.ascontiguousarray(H, dtype="<f4").tobytes())
    meta_bytes = json.dumps(emb.meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<Q", len(meta_bytes)))
    parts.append(meta_bytes)
    body = b"".join(parts)
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<Q", checksum64(body)))
    return path


def load_embeddings(path, expect_dim=None):
    """Parse and verify completely before exposing anything."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 + 28 + 8:
        raise EmbeddingIOError(f"{path}: truncated file ({len(raw)} bytes)")
    body, tail = raw[:-8], raw[-8:]
    if checksum64(body) != struct.unpack("<Q", tail)[0]:
        raise EmbeddingIOError(f"{path}: checksum mismatch (corrupt or partial)")
    if body[:4] != _MAGIC:
        raise EmbeddingIOError(f"{path}: bad magic {body[:4]!r}")
    version, N, D, K, flags, n_tokens = struct.unpack("<IQIIII", body[4:32])
    if version != _VERSION:
        raise EmbeddingIOError(f"{path}: unsupported version {version}")
    if expect_dim is not None and D != expect_dim:
        raise EmbeddingIOError(
            f"{path}: embedding dim mismatch: expected {expect_dim}, file has {D}")

    off = 32
    def take(count, what):
        nonlocal off
        nbytes = 4 * count
        if off + nbytes > len(body):
            raise EmbeddingIOError(
                f"{path}: truncated in {what} at byte {off}")
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=off)
        off += nbytes
        return arr

    X = [take(N * D, f"X_{k + 1}").reshape(N, D).copy() for k in range(K)]
    H = None
    if flags & _FLAG_TOKENS:
        H = [take(N * n_tokens * D, f"H_{k + 1}").reshape(N, n_tokens, D).copy()
             for k in range(K)]
    if off + 8 > len(body):
        raise EmbeddingIOError(f"{path}: truncated before metadata at byte {off}")
    (meta_len,) = struct.unpack("<Q", body[off:off + 8])
    off += 8
    if off + meta_len != len(body):
        raise EmbeddingIOError(
            f"{path}: metadata length {meta_len} inconsistent with file size")
    meta = json.loads(body[off:off + meta_len].decode("utf-8"))
    return EmbeddingSet(X=X, H=H, meta=meta)
