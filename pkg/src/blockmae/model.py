"""K-partitioned ViT encoder with per-block masked-autoencoding decoders.

The encoder is a stack of n_layers pre-norm transformer layers split into K
equal blocks. Block 1 owns the tubelet embedding, block K applies the output
LayerNorm. With isolation on, each block's output is passed through
stop_gradient before feeding the next block, so the loss attached at depth k
can only update block k and its decoder.

Decoder layout distinguishes the training families: "per_block" instantiates
one decoder per block (blockwise regimes), "final_only" a single decoder at
block K (the end-to-end baseline). Decoder shape is fixed by config
(default depth 4, width 192, 3 heads) independent of encoder size.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import (LayerNorm, Linear, Module, ModuleList, TransformerLayer,
                 sincos_pos_encoding_3d, trunc_normal)
from .tokenizer import TokenGrid
from .util import spawn_rng


@dataclass
class EncoderConfig:
    embed_dim: int
    n_heads: int
    K: int
    n_layers: int = 12
    mlp_ratio: float = 4.0
    tubelet: tuple = (8, 16, 16)
    channels: int = 1
    decoder_depth: int = 4
    decoder_width: int = 192
    decoder_heads: int = 3
    boundary_layernorm: bool = False
    decoder_pos_after_scatter: bool = True

    def __post_init__(self):
        self.tubelet = tuple(self.tubelet)
        if self.K < 1 or self.n_layers % self.K != 0:
            raise ValueError(f"K={self.K} must divide n_layers={self.n_layers}")
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")

    @property
    def layers_per_block(self):
        return self.n_layers // self.K

    @classmethod
    def tiny(cls, K=4, **over):
        return cls(embed_dim=192, n_heads=3, K=K, **over)

    @classmethod
    def small(cls, K=4, **over):
        return cls(embed_dim=384, n_heads=6, K=K, **over)

    def to_dict(self):
        d = asdict(self)
        d["tubelet"] = list(self.tubelet)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "tubelet": tuple(d["tubelet"])})


@dataclass
class ParamCount:
    p_enc: int
    p_dec: int
    K: int

    @property
    def p_e2e(self):
        return self.p_enc + self.p_dec

    @property
    def p_bw(self):
        return self.p_enc + self.K * self.p_dec

    @property
    def relative_increase(self):
        return (self.K - 1) * self.p_dec / self.p_e2e


class Decoder(Module):
    """Linear projection -> scatter with a learned mask token -> small ViT -> head."""

    def __init__(self, d_in, cfg, grid, rng):
        w = cfg.decoder_width
        self.proj = Linear(d_in, w, rng)
        self.mask_token = Tensor(trunc_normal((w,), 0.02, rng), requires_grad=True)
        self.layers = ModuleList(TransformerLayer(w, cfg.decoder_heads, rng)
                                 for _ in range(cfg.decoder_depth))
        self.norm = LayerNorm(w)
        self.head = Linear(w, grid.patch_dim, rng)
        self.pos = sincos_pos_encoding_3d(grid, w)  # fixed, not a parameter
        self.pos_after_scatter = cfg.decoder_pos_after_scatter
        self.total_tokens = grid.total_tokens

    def forward(self, h_visible, visible_idx, masked_idx):
        B, n_vis, _ = h_visible.shape
        x = self.proj(h_visible)
        if not self.pos_after_scatter:
            x = ad.add(x, Tensor(self.pos[visible_idx]))
        width = self.mask_token.shape[0]
        base = ad.add(Tensor(np.zeros((B, self.total_tokens, width), dtype=np.float32)),
                      ad.reshape(self.mask_token, (1, 1, width)))
        full = ad.scatter_rows(base, visible_idx, x)
        if self.pos_after_scatter:
            full = ad.add(full, Tensor(self.pos[None, :, :]))
        for layer in self.layers:
            full = layer(full)
        full = self.norm(full)
        pred = self.head(full)
        return ad.gather_rows(pred, masked_idx)


class BlockModel(Module):
    def __init__(self, config, grid, decoder_layout="per_block", seed=0):
        if decoder_layout not in ("per_block", "final_only"):
            raise ValueError(f"unknown decoder layout {decoder_layout!r}")
        if grid.patch_dim != np.prod(config.tubelet) * config.channels:
            raise ValueError("token grid does not match config tubelet/channels")
        self.config = config
        self.grid = grid
        self.decoder_layout = decoder_layout
        D, K = config.embed_dim, config.K

        self.embed = Linear(grid.patch_dim, D, spawn_rng(seed, "init", "embed"))
        self.blocks = ModuleList(
            ModuleList(TransformerLayer(D, config.n_heads,
                                        spawn_rng(seed, "init", "block", k, i),
                                        mlp_ratio=config.mlp_ratio)
                       for i in range(config.layers_per_block))
            for k in range(K))
        if config.boundary_layernorm:
            self.boundary_norms = ModuleList(LayerNorm(D) for _ in range(K - 1))
        else:
            self.boundary_norms = None
        self.final_norm = LayerNorm(D)

        n_dec = K if decoder_layout == "per_block" else 1
        self.decoders = ModuleList(
            Decoder(D, config, grid, spawn_rng(seed, "init", "decoder", j))
            for j in range(n_dec))
        self.pos = sincos_pos_encoding_3d(grid, D)

    # -- forward ------------------------------------------------------------

    def forward_blocks(self, visible_tokens, visible_idx, isolate, upto=None):
        """Run blocks 1..upto (default all K), returning each boundary output h_k.

        visible_tokens: (B, n_vis, patch_dim) raw patches; visible_idx: (B, n_vis)
        positions into the flat token grid. With isolate on, stop_gradient is
        inserted between consecutive blocks; forward values are unchanged.
        """
        if visible_tokens.shape[1] == 0:
            raise ValueError("empty visible token sequence (mask ratio 1?)")
        K = self.config.K if upto is None else upto
        x = Tensor(np.asarray(visible_tokens, dtype=np.float32)) \
            if not isinstance(visible_tokens, Tensor) else visible_tokens
        x = ad.add(self.embed(x), Tensor(self.pos[visible_idx]))
        hs = []
        for k in range(K):
            for layer in self.blocks[k]:
                x = layer(x)
            if k == self.config.K - 1:
                x = self.final_norm(x)
            elif self.boundary_norms is not None:
                x = self.boundary_norms[k](x)
            hs.append(x)
            if k < K - 1:
                x = ad.stop_gradient(hs[-1]) if isolate else hs[-1]
        return hs

    def forward_full(self, tokens):
        """All-tokens forward (extraction path); never consumes a mask."""
        B, total, _ = tokens.shape
        idx = np.broadcast_to(np.arange(total), (B, total))
        return self.forward_blocks(tokens, idx, isolate=False)

    def decoder_for(self, k):
        """Decoder attached at block k (1-based)."""
        K = self.config.K
        if self.decoder_layout == "final_only":
            if k != K:
                raise ValueError(
                    f"no intermediate decoders in final_only layout (asked for "
                    f"block {k} of {K})")
            return self.decoders[0]
        if not 1 <= k <= K:
            raise ValueError(f"block index {k} outside 1..{K}")
        return self.decoders[k - 1]

    def decode_block(self, k, h_k, visible_idx, masked_idx):
        if masked_idx.shape[1] == 0:
            raise ValueError("no masked positions: reconstruction loss undefined")
        if visible_idx.shape[1] + masked_idx.shape[1] != self.grid.total_tokens:
            raise ValueError("mask does not partition the token grid")
        return self.decoder_for(k)(h_k, visible_idx, masked_idx)

    # -- parameter bookkeeping -----------------------------------------------

    def encoder_param_items(self):
        skip = f"decoders."
        return [(n, p) for n, p in self.named_parameters()
                if not n.startswith(skip)]

    def block_param_items(self, k):
        """Named params of encoder block k (1-based): its layers, plus the
        tubelet embedding for block 1, boundary norm k (if any), and the
        output LayerNorm for block K."""
        items = []
        for n, p in self.named_parameters():
            if n.startswith(f"blocks.{k - 1}."):
                items.append((n, p))
            elif k == 1 and n.startswith("embed."):
                items.append((n, p))
            elif k == self.config.K and n.startswith("final_norm."):
                items.append((n, p))
            elif (self.boundary_norms is not None and k < self.config.K
                  and n.startswith(f"boundary_norms.{k - 1}.")):
                items.append((n, p))
        return items

    def decoder_param_items(self, k):
        j = 0 if self.decoder_layout == "final_only" else k - 1
        return [(n, p) for n, p in self.named_parameters()
                if n.startswith(f"decoders.{j}.")]

    def params_digest(self, items=None):
        h = hashlib.blake2b(digest_size=16)
        for name, p in (items if items is not None else self.named_parameters()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def masked_mse(pred, target):
    """Mean squared error over batch x masked tokens x patch dims."""
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=np.float32))
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} vs target {target.shape}")
    if pred.shape[1] == 0:
        raise ValueError("masked MSE undefined with zero masked tokens")
    diff = ad.sub(pred, target)
    return ad.tmean(ad.mul(diff, diff))


def count_params(config, grid=None):
    """Exact parameter counts by enumerating a freshly built registry."""
    if grid is None:
        ts, hs, ws = config.tubelet
        grid = TokenGrid.for_clip(2 * ts, 8 * hs, 8 * ws, config.tubelet,
                                  channels=config.channels)
    m = BlockModel(config, grid, decoder_layout="per_block", seed=0)
    p_dec = sum(p.data.size for _, p in m.decoder_param_items(1))
    p_total = m.param_count()
    p_enc = p_total - config.K * p_dec
    return ParamCount(p_enc=int(p_enc), p_dec=int(p_dec), K=config.K)


# ---------------------------------------------------------------------------
# checkpoint format: magic | version | header-len | header JSON | params f32 |
# optional optimizer blocks | blake2b-64 checksum of all preceding bytes
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"BWCK"
_CKPT_VERSION = 1


def save_checkpoint(path, model, progress=None, optimizer_groups=None,
                    run_info=None):
    """optimizer_groups: list of {"t": int, "params": [(name, m, v), ...]}.
    run_info: free-form provenance (regime, seed, ...) echoed back on load."""
    names, params = zip(*model.named_parameters())
    header = {
        "config": model.config.to_dict(),
        "decoder_layout": model.decoder_layout,
        "grid": {"t_tokens": model.grid.t_tokens, "h_tokens": model.grid.h_tokens,
                 "w_tokens": model.grid.w_tokens, "tubelet": list(model.grid.tubelet),
                 "channels": model.grid.channels},
        "params": [[n, list(p.shape)] for n, p in zip(names, params)],
        "progress": progress,
        "run_info": run_info,
        "optimizer": ([{"t": g["t"], "params": [n for n, _, _ in g["params"]]}
                       for g in optimizer_groups]
                      if optimizer_groups is not None else None),
    }
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = bytearray()
    buf += _CKPT_MAGIC
    buf += struct.pack("<I", _CKPT_VERSION)
    buf += struct.pack("<I", len(hjson))
    buf += hjson
    for p in params:
        buf += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    if optimizer_groups is not None:
        for g in optimizer_groups:
            buf += struct.pack("<Q", g["t"])
            for _, m, v in g["params"]:
                buf += np.ascontiguousarray(m, dtype="<f4").tobytes()
                buf += np.ascontiguousarray(v, dtype="<f4").tobytes()
    digest = hashlib.blake2b(bytes(buf), digest_size=8).digest()
    buf += digest
    with open(path, "wb") as f:
        f.write(buf)


class CheckpointError(ValueError):
    pass


def _take(raw, off, n, what):
    if off + n > len(raw):
        raise CheckpointError(
            f"checkpoint truncated at byte {len(raw)}: need {off + n} bytes "
            f"({what} at offset {off})")
    return raw[off:off + n], off + n


def load_checkpoint(path, seed=0):
    """Rebuild the model (and optimizer state blobs) saved by save_checkpoint."""
    with open(path, "rb") as f:
        raw = f.read()
    body, stored = raw[:-8], raw[-8:]
    if len(raw) < 8 or hashlib.blake2b(body, digest_size=8).digest() != stored:
        raise CheckpointError("checkpoint checksum mismatch (file corrupt or truncated)")
    off = 0
    magic, off = _take(raw, off, 4, "magic")
    if magic != _CKPT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0, expected {_CKPT_MAGIC!r}")
    ver_b, off = _take(raw, off, 4, "version")
    version = struct.unpack("<I", ver_b)[0]
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} "
                              f"(offset 4), expected {_CKPT_VERSION}")
    hlen_b, off = _take(raw, off, 4, "header length")
    hlen = struct.unpack("<I", hlen_b)[0]
    hjson, off = _take(raw, off, hlen, "header JSON")
    try:
        header = json.loads(hjson.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header JSON at offset 12 (length {hlen}): "
                              f"{exc}") from exc

    config = EncoderConfig.from_dict(header["config"])
    g = header["grid"]
    grid = TokenGrid(g["t_tokens"], g["h_tokens"], g["w_tokens"],
                     tuple(g["tubelet"]), g["channels"])
    model = BlockModel(config, grid, decoder_layout=header["decoder_layout"],
                       seed=seed)

    live = dict(model.named_parameters())
    if [n for n, _ in header["params"]] != list(live):
        raise CheckpointError("checkpoint parameter manifest does not match "
                              "the rebuilt model")
    for name, shape in header["params"]:
        p = live[name]
        if list(p.shape) != shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint "
                                  f"{shape}, model {list(p.shape)}")
        nbytes = int(np.prod(shape)) * 4 if shape else 4
        chunk, off = _take(raw, off, nbytes, f"parameter {name}")
        p.data = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        p.grad = np.zeros_like(p.data)

    opt_groups = None
    if header.get("optimizer") is not None:
        opt_groups = []
        for gmeta in header["optimizer"]:
            t_b, off = _take(raw, off, 8, "optimizer step counter")
            t = struct.unpack("<Q", t_b)[0]
            entries = []
            for name in gmeta["params"]:
                shape = list(live[name].shape)
                nbytes = int(np.prod(shape)) * 4 if shape else 4
                m_b, off = _take(raw, off, nbytes, f"moment m of {name}")
                v_b, off = _take(raw, off, nbytes, f"moment v of {name}")
                entries.append((name,
                                np.frombuffer(m_b, dtype="<f4").reshape(shape).copy(),
                                np.frombuffer(v_b, dtype="<f4").reshape(shape).copy()))
            opt_groups.append({"t": t, "params": entries})
    if off != len(raw) - 8:
        raise CheckpointError(f"trailing bytes: parsed up to offset {off}, "
                              f"checksum starts at {len(raw) - 8}")
    return model, header, opt_groups
