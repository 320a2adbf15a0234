"""Tubelet tokenization and spatiotemporal token masking.

A clip (T, H, W, C) is partitioned into non-overlapping tubelets of
(t_size, h_size, w_size) pixels; each tubelet, flattened, is one token.
Tokens are ordered (t, h, w) row-major, i.e. the spatial w index moves
fastest. The flattened pixel tubelets double as the reconstruction targets.

Masking is uniform over the token grid (no structured tube masking): one
MaskPattern is sampled per clip per step and reused by every block's loss so
all regimes see the same corruption.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_AXIS_NAMES = ("temporal (T)", "height (H)", "width (W)")


@dataclass(frozen=True)
class TokenGrid:
    t_tokens: int
    h_tokens: int
    w_tokens: int
    tubelet: tuple  # (t_size, h_size, w_size)
    channels: int = 1

    @property
    def total_tokens(self):
        return self.t_tokens * self.h_tokens * self.w_tokens

    @property
    def patch_dim(self):
        ts, hs, ws = self.tubelet
        return ts * hs * ws * self.channels

    @classmethod
    def for_clip(cls, T, H, W, tubelet, channels=1):
        sizes = (T, H, W)
        for dim, size, name in zip(sizes, tubelet, _AXIS_NAMES):
            if size <= 0 or dim % size != 0:
                raise ValueError(
                    f"{name} extent {dim} is not divisible by tubelet size {size}")
        return cls(T // tubelet[0], H // tubelet[1], W // tubelet[2],
                   tuple(tubelet), channels)


@dataclass
class MaskPattern:
    """Boolean mask over the flat (t, h, w) row-major token order."""

    masked: np.ndarray  # (total_tokens,) bool

    @property
    def n_masked(self):
        return int(self.masked.sum())

    @property
    def n_visible(self):
        return int(self.masked.size - self.masked.sum())

    @property
    def masked_idx(self):
        return np.flatnonzero(self.masked)

    @property
    def visible_idx(self):
        return np.flatnonzero(~self.masked)


def tubelet_tokenize(frames, grid):
    """(T, H, W, C) -> (total_tokens, patch_dim) tokens plus identical targets.

    The raw flattened tubelets serve both as the embedding input and as the
    reconstruction ground truth, so the same array is returned for both.
    """
    ts, hs, ws = grid.tubelet
    T, H, W, C = frames.shape
    if (T, H, W) != (grid.t_tokens * ts, grid.h_tokens * hs, grid.w_tokens * ws):
        raise ValueError(f"clip dims {(T, H, W)} do not match grid "
                         f"{(grid.t_tokens, grid.h_tokens, grid.w_tokens)} "
                         f"x tubelet {grid.tubelet}")
    if C != grid.channels:
        raise ValueError(f"clip has {C} channels, grid expects {grid.channels}")
    x = frames.reshape(grid.t_tokens, ts, grid.h_tokens, hs, grid.w_tokens, ws, C)
    x = x.transpose(0, 2, 4, 1, 3, 5, 6)  # (t, h, w, ts, hs, ws, C)
    tokens = np.ascontiguousarray(x).reshape(grid.total_tokens, grid.patch_dim)
    return tokens, tokens


def untokenize(tokens, grid):
    """Inverse of tubelet_tokenize; bit-exact round trip."""
    ts, hs, ws = grid.tubelet
    x = tokens.reshape(grid.t_tokens, grid.h_tokens, grid.w_tokens,
                       ts, hs, ws, grid.channels)
    x = x.transpose(0, 3, 1, 4, 2, 5, 6)
    return np.ascontiguousarray(x).reshape(grid.t_tokens * ts, grid.h_tokens * hs,
                                           grid.w_tokens * ws, grid.channels)


def n_masked_for(total_tokens, mask_ratio):
    # nearest integer, ties rounded up
    return int(np.floor(mask_ratio * total_tokens + 0.5))


def sample_mask(grid, mask_ratio, rng):
    """Uniform without-replacement sample of round(ratio * total) positions."""
    if not 0.0 <= mask_ratio <= 1.0:
        raise ValueError(f"mask_ratio must lie in [0, 1], got {mask_ratio}")
    total = grid.total_tokens
    n_mask = n_masked_for(total, mask_ratio)
    masked = np.zeros(total, dtype=bool)
    if n_mask:
        masked[rng.choice(total, size=n_mask, replace=False)] = True
    return MaskPattern(masked=masked)


def gather_visible(tokens, mask):
    """Order-preserving selection of visible tokens plus their index map."""
    idx = mask.visible_idx
    return tokens[idx], idx
