"""The three training regimes: sequential blockwise, simultaneous blockwise, E2E.

Epoch accounting follows the matched-updates convention: sequential training
runs K stages of E epochs (K*E dataset passes), while simultaneous and E2E
run E epochs total, so every encoder parameter sees E update-epochs in all
regimes.

All per-step randomness (epoch shuffles, mask patterns) is drawn from
counter-based streams keyed by (seed, purpose, epoch, step, slot) and never
by regime or stage, which gives masking parity: at a given seed and
stage-local step, all three regimes consume the identical MaskPattern
sequence, and an interrupted run resumed from a checkpoint replays the exact
uninterrupted stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import BlockModel, load_checkpoint, masked_mse, save_checkpoint
from .optim import AdamW, cosine_lr
from .tokenizer import TokenGrid, sample_mask, tubelet_tokenize
from .util import spawn_rng

REGIMES = ("sequential", "simultaneous", "e2e")


@dataclass
class RegimeConfig:
    regime: str
    epochs: int = 1
    total_steps: int = None  # per-stage step budget; overrides epochs when set
    batch_size: int = 8
    seed: int = 0
    base_lr: float = 1e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_frac: float = 0.05
    mask_ratio: float = 0.9
    checkpoint_every: int = None  # steps; None disables periodic checkpoints

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.epochs < 1 and self.total_steps is None:
            raise ValueError("need epochs >= 1 or an explicit total_steps")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    passes: int = 0  # completed dataset passes across all stages
    update_epochs: dict = field(default_factory=dict)  # block -> epochs updated

    def record(self, step, stage, epoch, block, loss, lr):
        if not np.isfinite(loss):
            raise ValueError("refusing to record a non-finite loss")
        self.rows.append({"step": step, "stage": stage, "epoch": epoch,
                          "block": block, "loss": float(loss), "lr": float(lr)})

    def complete_epoch(self, updated_blocks):
        self.passes += 1
        for k in updated_blocks:
            self.update_epochs[k] = self.update_epochs.get(k, 0) + 1

    def epoch_means(self):
        agg = {}
        for r in self.rows:
            key = (r["stage"], r["epoch"], r["block"])
            agg.setdefault(key, []).append(r["loss"])
        return {k: float(np.mean(v)) for k, v in agg.items()}

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write("step,stage,block,loss,lr\n")
            for r in self.rows:
                f.write(f"{r['step']},{r['stage']},{r['block']},"
                        f"{r['loss']!r},{r['lr']!r}\n")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, step, checkpoint_path):
        super().__init__(msg)
        self.step = step
        self.checkpoint_path = checkpoint_path


def tokenize_dataset(dataset, config):
    """Tokenize every clip once up front: (N, total_tokens, patch_dim) float32."""
    shape = dataset.clips[0].frames.shape
    grid = TokenGrid.for_clip(*shape[:3], config.tubelet, channels=shape[3])
    toks = np.stack([tubelet_tokenize(c.frames, grid)[0] for c in dataset.clips])
    return toks, grid


def batch_masks(grid, mask_ratio, seed, epoch, step, n_slots):
    """The regime-independent mask stream: one pattern per batch slot."""
    masks = [sample_mask(grid, mask_ratio, spawn_rng(seed, "mask", epoch, step, b))
             for b in range(n_slots)]
    vis = np.stack([m.visible_idx for m in masks])
    msk = np.stack([m.masked_idx for m in masks])
    return vis, msk


def _epoch_order(seed, epoch, n):
    return spawn_rng(seed, "shuffle", epoch).permutation(n)


def _optimizer(cfg, params):
    return AdamW(params, lr=cfg.base_lr, beta1=cfg.beta1, beta2=cfg.beta2,
                 eps=cfg.eps, weight_decay=cfg.weight_decay)


def _optimizer_groups_blob(named_opts):
    return [{"t": opt.state.t,
             "params": [(n, m, v) for (n, _), m, v
                        in zip(items, opt.state.m, opt.state.v)]}
            for items, opt in named_opts]


class _Stage:
    """One optimization stage: which blocks run, which losses attach, who updates."""

    def __init__(self, model, cfg, stage_idx, blocks_with_loss, trained_blocks,
                 isolate, upto, whole_model=False):
        self.stage_idx = stage_idx
        self.blocks_with_loss = blocks_with_loss
        self.trained_blocks = trained_blocks
        self.isolate = isolate
        self.upto = upto
        self.groups = []  # list of (named param items, AdamW)
        if whole_model:
            items = list(model.named_parameters())
            self.groups.append((items, _optimizer(cfg, [p for _, p in items])))
        else:
            for k in trained_blocks:
                items = model.block_param_items(k) + model.decoder_param_items(k)
                self.groups.append((items, _optimizer(cfg, [p for _, p in items])))


def _stages_for(model, cfg):
    K = model.config.K
    if cfg.regime == "sequential":
        return [_Stage(model, cfg, k, blocks_with_loss=[k], trained_blocks=[k],
                       isolate=True, upto=k)
                for k in range(1, K + 1)]
    if cfg.regime == "simultaneous":
        return [_Stage(model, cfg, 1, blocks_with_loss=list(range(1, K + 1)),
                       trained_blocks=list(range(1, K + 1)), isolate=True,
                       upto=None)]
    return [_Stage(model, cfg, 1, blocks_with_loss=[K],
                   trained_blocks=list(range(1, K + 1)), isolate=False,
                   upto=None, whole_model=True)]


def train(model_config, dataset, cfg, out_dir=None, resume=None):
    """Train under cfg.regime and return (model, TrainLog).

    Sequential: K stages, stage k updating only (f_k, d_k) with fresh
    optimizer state, earlier blocks frozen. Simultaneous: one isolated
    forward per step, K losses on the shared mask, each (f_k, d_k) updated
    by its own loss. E2E: one decoder at block K, gradients through the
    whole encoder.

    On a non-finite loss (or gradient) the run aborts with TrainingDiverged
    carrying the last good checkpoint.
    """
    toks_all, grid = tokenize_dataset(dataset, model_config)
    n_clips = toks_all.shape[0]
    layout = "final_only" if cfg.regime == "e2e" else "per_block"

    start = None
    if resume is not None:
        model, header, opt_blobs = load_checkpoint(resume)
        start = header["progress"]
        if start is None or start.get("regime") != cfg.regime:
            raise ValueError("checkpoint is not a mid-run state for this regime")
        if model.grid != grid:
            raise ValueError("checkpoint token grid does not match the dataset")
    else:
        model = BlockModel(model_config, grid, decoder_layout=layout, seed=cfg.seed)
        opt_blobs = None

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    log = TrainLog()
    steps_per_epoch = math.ceil(n_clips / cfg.batch_size)
    stage_total = (cfg.total_steps if cfg.total_steps is not None
                   else cfg.epochs * steps_per_epoch)
    warmup = int(round(cfg.warmup_frac * stage_total))
    global_step = 0
    binds = np.arange(min(cfg.batch_size, n_clips))[:, None]

    for stage in _stages_for(model, cfg):
        if start is not None and stage.stage_idx < start["stage"]:
            continue
        if start is not None and stage.stage_idx == start["stage"]:
            for (items, opt), blob in zip(stage.groups, opt_blobs):
                for (name, _), (bname, _, _) in zip(items, blob["params"]):
                    if name != bname:
                        raise ValueError(
                            f"optimizer state mismatch: {bname} vs {name}")
                opt.load_state_arrays(blob["t"], [m for _, m, _ in blob["params"]],
                                      [v for _, _, v in blob["params"]])
        steps_done = 0 if start is None else start["stage_steps_done"]
        global_step = (stage.stage_idx - 1) * stage_total + steps_done \
            if cfg.regime == "sequential" else steps_done
        while steps_done < stage_total:
            epoch = steps_done // steps_per_epoch
            order = _epoch_order(cfg.seed, epoch, n_clips)
            for i in range(steps_done % steps_per_epoch, steps_per_epoch):
                if steps_done >= stage_total:
                    break
                idx = order[i * cfg.batch_size:(i + 1) * cfg.batch_size]
                batch = toks_all[idx]
                vis_idx, msk_idx = batch_masks(grid, cfg.mask_ratio, cfg.seed,
                                               epoch, i, len(idx))
                b = binds[:len(idx)]
                vis_tokens = batch[b, vis_idx]
                targets = batch[b, msk_idx]
                lr = cosine_lr(steps_done, stage_total, cfg.base_lr, warmup)

                hs = model.forward_blocks(vis_tokens, vis_idx,
                                          isolate=stage.isolate, upto=stage.upto)
                losses = {}
                for k in stage.blocks_with_loss:
                    pred = model.decode_block(k, hs[k - 1], vis_idx, msk_idx)
                    losses[k] = masked_mse(pred, targets)

                bad = [k for k, L in losses.items() if not np.isfinite(L.data)]
                if bad:
                    path = _abort_checkpoint(out_dir, model, cfg, stage,
                                             epoch, steps_done, global_step)
                    raise TrainingDiverged(
                        f"non-finite loss at block(s) {bad}, stage "
                        f"{stage.stage_idx} step {steps_done}", global_step, path)

                model.zero_grad()
                total = None
                for L in losses.values():
                    total = L if total is None else ad.add(total, L)
                total.backward()
                try:
                    for _, opt in stage.groups:
                        opt.step(lr=lr)
                except ValueError as exc:
                    path = _abort_checkpoint(out_dir, model, cfg, stage,
                                             epoch, steps_done, global_step)
                    raise TrainingDiverged(
                        f"optimizer rejected step: {exc}", global_step, path) from exc

                for k in stage.blocks_with_loss:
                    log.record(global_step, stage.stage_idx, epoch, k,
                               losses[k].data, lr)
                steps_done += 1
                global_step += 1

                if (out_dir is not None and cfg.checkpoint_every
                        and steps_done % cfg.checkpoint_every == 0
                        and steps_done < stage_total):
                    _periodic_checkpoint(out_dir, model, cfg, stage, epoch,
                                         steps_done, global_step)
            if steps_done % steps_per_epoch == 0 and steps_done > 0:
                log.complete_epoch(stage.trained_blocks)
        if out_dir is not None:
            save_checkpoint(out_dir / f"stage{stage.stage_idx}.ckpt", model)
        start = None  # only the first uncompleted stage resumes mid-way

    if out_dir is not None:
        save_checkpoint(out_dir / "final.ckpt", model,
                        run_info={"regime": cfg.regime, "seed": cfg.seed,
                                  "base_lr": cfg.base_lr,
                                  "mask_ratio": cfg.mask_ratio})
        log.to_csv(out_dir / "train_log.csv")
    return model, log


def _progress(cfg, stage, epoch, steps_done, global_step):
    return {"regime": cfg.regime, "stage": stage.stage_idx, "epoch": epoch,
            "stage_steps_done": steps_done, "global_step": global_step}


def _periodic_checkpoint(out_dir, model, cfg, stage, epoch, steps_done, global_step):
    path = out_dir / f"step{global_step:07d}.ckpt"
    save_checkpoint(path, model,
                    progress=_progress(cfg, stage, epoch, steps_done, global_step),
                    optimizer_groups=_optimizer_groups_blob(stage.groups))
    return path


def _abort_checkpoint(out_dir, model, cfg, stage, epoch, steps_done, global_step):
    if out_dir is None:
        return None
    path = out_dir / "last_good.ckpt"
    save_checkpoint(path, model,
                    progress=_progress(cfg, stage, epoch, steps_done, global_step),
                    optimizer_groups=_optimizer_groups_blob(stage.groups))
    return path
