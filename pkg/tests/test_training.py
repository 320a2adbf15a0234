"""Trainer behavior: pass accounting, freezing, mask parity, divergence, resume."""

import csv

import numpy as np
import pytest

from blockmae import training
from blockmae.data import build_dataset
from blockmae.model import BlockModel, EncoderConfig, load_checkpoint
from blockmae.tokenizer import TokenGrid
from blockmae.training import RegimeConfig, TrainLog, TrainingDiverged, train


def small_dataset(count=30, seed=3):
    return build_dataset({
        "generator": "single", "count": count, "T": 8, "H": 16, "W": 16,
        "seed": seed,
        "grids": {"orientation": [0.0, 90.0], "spatial_frequency": [2.0],
                  "temporal_frequency": [1.0], "contrast": [1.0]},
    })


def tiny_config(K=3, n_layers=None):
    return EncoderConfig(embed_dim=32, n_heads=2, K=K,
                         n_layers=K if n_layers is None else n_layers,
                         mlp_ratio=2.0, tubelet=(4, 8, 8),
                         decoder_depth=1, decoder_width=16, decoder_heads=2)


def cfg_for(regime, **kw):
    kw.setdefault("epochs", 2)
    kw.setdefault("batch_size", 10)
    kw.setdefault("seed", 1)
    kw.setdefault("base_lr", 1e-3)
    return RegimeConfig(regime=regime, **kw)


# --- pass accounting (K=3, E=2, 30 clips: 6 / 2 / 2 dataset passes) ----------

def test_sequential_pass_accounting():
    model, log = train(tiny_config(), small_dataset(), cfg_for("sequential"))
    assert log.passes == 6
    assert log.update_epochs == {1: 2, 2: 2, 3: 2}
    # one loss row per step, 6 steps per stage, 3 stages
    assert len(log.rows) == 18
    assert [r["stage"] for r in log.rows] == [1] * 6 + [2] * 6 + [3] * 6
    assert all(r["block"] == r["stage"] for r in log.rows)


def test_simultaneous_pass_accounting():
    model, log = train(tiny_config(), small_dataset(), cfg_for("simultaneous"))
    assert log.passes == 2
    assert log.update_epochs == {1: 2, 2: 2, 3: 2}
    # K loss rows per step, 6 steps
    assert len(log.rows) == 18
    assert sorted({r["block"] for r in log.rows}) == [1, 2, 3]
    assert all(r["stage"] == 1 for r in log.rows)


def test_e2e_pass_accounting():
    model, log = train(tiny_config(), small_dataset(), cfg_for("e2e"))
    assert log.passes == 2
    assert log.update_epochs == {1: 2, 2: 2, 3: 2}
    # only the final block carries a loss
    assert len(log.rows) == 6
    assert all(r["block"] == 3 for r in log.rows)


def test_total_steps_overrides_epochs():
    model, log = train(tiny_config(), small_dataset(),
                       cfg_for("e2e", total_steps=5))
    assert len(log.rows) == 5
    assert log.passes == 1  # only the first full pass completed


def test_regime_config_validation():
    with pytest.raises(ValueError):
        RegimeConfig(regime="blockwise")
    with pytest.raises(ValueError):
        RegimeConfig(regime="e2e", epochs=0)


# --- sequential freezing ------------------------------------------------------

def test_sequential_freezes_earlier_blocks(tmp_path):
    config = tiny_config()
    ds = small_dataset()
    cfg = cfg_for("sequential")
    train(config, ds, cfg, out_dir=tmp_path)

    grid = TokenGrid.for_clip(8, 16, 16, config.tubelet)
    init = BlockModel(config, grid, decoder_layout="per_block", seed=cfg.seed)
    stages = [load_checkpoint(tmp_path / f"stage{s}.ckpt")[0] for s in (1, 2, 3)]

    def digest(m, k):
        return m.params_digest(m.block_param_items(k) + m.decoder_param_items(k))

    # stage 1 trains exactly (f_1, d_1); the rest stay at their init values
    assert digest(stages[0], 1) != digest(init, 1)
    assert digest(stages[0], 2) == digest(init, 2)
    assert digest(stages[0], 3) == digest(init, 3)
    # stage 2 leaves (f_1, d_1) untouched and trains (f_2, d_2)
    assert digest(stages[1], 1) == digest(stages[0], 1)
    assert digest(stages[1], 2) != digest(stages[0], 2)
    assert digest(stages[1], 3) == digest(init, 3)
    # stage 3 leaves both earlier pairs untouched
    assert digest(stages[2], 1) == digest(stages[0], 1)
    assert digest(stages[2], 2) == digest(stages[1], 2)
    assert digest(stages[2], 3) != digest(init, 3)


# --- masking parity across regimes -------------------------------------------

def test_mask_stream_is_regime_independent(monkeypatch):
    config = tiny_config()
    ds = small_dataset()
    real = training.batch_masks
    seen = {}
    current = {}

    def spy(grid, ratio, seed, epoch, step, n_slots):
        vis, msk = real(grid, ratio, seed, epoch, step, n_slots)
        seen[current["regime"]].append((epoch, step, vis.copy(), msk.copy()))
        return vis, msk

    monkeypatch.setattr(training, "batch_masks", spy)
    for regime in ("sequential", "simultaneous", "e2e"):
        seen[regime] = []
        current["regime"] = regime
        train(config, ds, cfg_for(regime))

    def same(a, b):
        return (a[0] == b[0] and a[1] == b[1]
                and np.array_equal(a[2], b[2]) and np.array_equal(a[3], b[3]))

    assert len(seen["simultaneous"]) == len(seen["e2e"]) == 6
    assert len(seen["sequential"]) == 18
    for i in range(6):
        assert same(seen["simultaneous"][i], seen["e2e"][i])
        # every sequential stage replays the same stage-local mask stream
        for s in range(3):
            assert same(seen["sequential"][s * 6 + i], seen["simultaneous"][i])


# --- learning happens ---------------------------------------------------------

def test_losses_decrease_when_overfitting():
    config = tiny_config(K=2, n_layers=2)
    ds = small_dataset(count=4, seed=7)
    cfg = cfg_for("simultaneous", epochs=40, batch_size=4, base_lr=5e-3)
    model, log = train(config, ds, cfg)
    for k in (1, 2):
        losses = [r["loss"] for r in log.rows if r["block"] == k]
        assert len(losses) == 40
        assert np.mean(losses[-5:]) < 0.9 * np.mean(losses[:5])


def test_k1_e2e_equals_k1_simultaneous():
    """With a single block there is no boundary, so the two blockwise-vs-E2E
    code paths must produce bit-identical parameter trajectories."""
    config = tiny_config(K=1, n_layers=2)
    ds = small_dataset(count=8, seed=5)
    m_sim, _ = train(config, ds, cfg_for("simultaneous", batch_size=4))
    m_e2e, _ = train(config, ds, cfg_for("e2e", batch_size=4))
    assert m_sim.params_digest() == m_e2e.params_digest()


# --- divergence ---------------------------------------------------------------

def test_divergence_aborts_with_last_good_checkpoint(tmp_path, monkeypatch):
    config = tiny_config(K=2, n_layers=2)
    ds = small_dataset(count=8, seed=2)
    real = training.masked_mse
    calls = {"n": 0}

    def poisoned(pred, target):
        calls["n"] += 1
        out = real(pred, target)
        if calls["n"] > 5:
            out.data = np.array(np.inf, dtype=np.float32)
        return out

    monkeypatch.setattr(training, "masked_mse", poisoned)
    with pytest.raises(TrainingDiverged) as ei:
        train(config, ds, cfg_for("simultaneous", epochs=10, batch_size=4),
              out_dir=tmp_path)
    assert ei.value.checkpoint_path == tmp_path / "last_good.ckpt"
    model, header, blobs = load_checkpoint(ei.value.checkpoint_path)
    assert header["progress"]["regime"] == "simultaneous"
    for _, p in model.named_parameters():
        assert np.isfinite(p.data).all()
    assert blobs is not None and len(blobs) == 2


def test_divergence_without_out_dir_has_no_checkpoint(monkeypatch):
    config = tiny_config(K=1, n_layers=1)
    ds = small_dataset(count=4, seed=2)

    def inf_loss(pred, target):
        from blockmae.model import masked_mse
        out = masked_mse(pred, target)
        out.data = np.array(np.inf, dtype=np.float32)
        return out

    monkeypatch.setattr(training, "masked_mse", inf_loss)
    with pytest.raises(TrainingDiverged) as ei:
        train(config, ds, cfg_for("e2e", batch_size=4))
    assert ei.value.checkpoint_path is None


# --- resume -------------------------------------------------------------------

def test_resume_reproduces_uninterrupted_run(tmp_path):
    config = tiny_config(K=2, n_layers=2)
    ds = small_dataset(count=12, seed=4)
    cfg = cfg_for("sequential", batch_size=4, checkpoint_every=2)

    full_dir = tmp_path / "full"
    m_full, log_full = train(config, ds, cfg, out_dir=full_dir)

    # 3 steps/epoch, 6 steps/stage: step0000004 is mid-stage-1 (epoch 1),
    # step0000008 is mid-stage-2 -- one resume crossing a stage boundary,
    # one resuming inside a stage with live optimizer state.
    for ckpt in ("step0000004.ckpt", "step0000008.ckpt"):
        out = tmp_path / f"resume_{ckpt.split('.')[0]}"
        m_res, log_res = train(config, ds, cfg, out_dir=out,
                               resume=full_dir / ckpt)
        assert m_res.params_digest() == m_full.params_digest()
        # the resumed log holds exactly the remaining steps, matching losses
        n = len(log_res.rows)
        tail = log_full.rows[-n:]
        assert [r["loss"] for r in log_res.rows] == [r["loss"] for r in tail]
        assert [r["step"] for r in log_res.rows] == [r["step"] for r in tail]


def test_resume_rejects_wrong_regime(tmp_path):
    config = tiny_config(K=2, n_layers=2)
    ds = small_dataset(count=8, seed=4)
    train(config, ds, cfg_for("sequential", batch_size=4, checkpoint_every=2),
          out_dir=tmp_path)
    with pytest.raises(ValueError, match="regime"):
        train(config, ds, cfg_for("e2e", batch_size=4),
              resume=tmp_path / "step0000002.ckpt")
    with pytest.raises(ValueError, match="mid-run"):
        train(config, ds, cfg_for("sequential", batch_size=4),
              resume=tmp_path / "final.ckpt")


# --- the log ------------------------------------------------------------------

def test_train_log_csv(tmp_path):
    model, log = train(tiny_config(K=1, n_layers=1),
                       small_dataset(count=4, seed=9),
                       cfg_for("e2e", epochs=2, batch_size=2))
    path = tmp_path / "log.csv"
    log.to_csv(path)
    with open(path) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == len(log.rows) == 4
    assert set(rows[0]) == {"step", "stage", "block", "loss", "lr"}
    assert [int(r["step"]) for r in rows] == [0, 1, 2, 3]
    assert all(float(r["loss"]) > 0 for r in rows)
    # warmup then cosine decay: lr peaks after warmup and ends near zero
    lrs = [float(r["lr"]) for r in rows]
    assert lrs[-1] < max(lrs)


def test_train_log_rejects_nonfinite():
    log = TrainLog()
    with pytest.raises(ValueError):
        log.record(0, 1, 0, 1, float("nan"), 1e-4)
