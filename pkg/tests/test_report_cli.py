"""Report assembly, chart emission, and the four CLI commands end to end."""

import json
from xml.etree import ElementTree

import numpy as np
import pytest

from blockmae.charts import line_chart, scatter_chart
from blockmae.cli import main
from blockmae.data import build_dataset
from blockmae.embeddings import extract, load_embeddings
from blockmae.model import BlockModel, EncoderConfig, load_checkpoint
from blockmae.report import MetricReport, model_name, probing_targets, report_for_run
from blockmae.tokenizer import TokenGrid


def tiny_model(K=2, layout="per_block"):
    config = EncoderConfig(embed_dim=32, n_heads=2, K=K, n_layers=K,
                           mlp_ratio=2.0, tubelet=(4, 8, 8),
                           decoder_depth=1, decoder_width=16, decoder_heads=2)
    grid = TokenGrid.for_clip(8, 16, 16, config.tubelet)
    return BlockModel(config, grid, decoder_layout=layout, seed=0)


def grating_spec(count=10, orientations=(0.0, 90.0), seed=6, **extra):
    return {"generator": "single", "count": count, "T": 8, "H": 16, "W": 16,
            "seed": seed,
            "grids": {"orientation": list(orientations),
                      "spatial_frequency": [2.0],
                      "temporal_frequency": [1.0], "contrast": [1.0]},
            **extra}


# --- MetricReport container -----------------------------------------------------

def test_report_csv_roundtrip_and_totals(tmp_path):
    rep = MetricReport()
    rep.add("sequential", "m", 2, 1, "probe_acc", "orientation", 0.75, 0)
    rep.add("sequential", "m", 2, 2, "probe_acc", "orientation", 1.0, 0)
    rep.add("e2e", "m", 2, 2, "occ_drop", "orientation", None, 0)
    path = tmp_path / "r.csv"
    rep.to_csv(path)
    header = path.read_text().splitlines()[0]
    assert header == "regime,model,K,block,metric,target,value,seed"

    back = MetricReport.read_csv(path)
    assert back.rows == rep.rows

    totals = rep.totals()
    assert totals["n_rows"] == 3
    assert totals["metrics"]["probe_acc"] == {"count": 2, "mean": 0.875}
    assert "occ_drop" not in totals["metrics"]  # only missing values

    rep.to_json(tmp_path / "r.json", extras={"scatter": {}})
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["totals"] == totals and doc["rows"] == rep.rows


def test_probing_targets_drops_constant_labels():
    labels = {"orientation": [0.0, 90.0, 0.0], "contrast": [1.0, 1.0, 1.0]}
    assert probing_targets(labels) == ["orientation"]


def test_model_name():
    assert model_name({"embed_dim": 32, "n_layers": 4, "K": 2}) == "vit-d32-l4-k2"


# --- report_for_run ---------------------------------------------------------------

def test_report_rows_per_metric():
    model = tiny_model()
    ds = build_dataset(grating_spec())
    emb = extract(model, ds, keep_tokens=True)
    rep, scatter = report_for_run(
        emb, "simultaneous", seed=3, metrics=("probe", "map", "cka", "cps", "mse"),
        model=model, dataset=ds)

    assert len(rep.select(metric="probe_acc", target="orientation")) == 2
    assert len(rep.select(metric="map", target="orientation")) == 2
    cka_rows = rep.select(metric="cka")
    assert [r["target"] for r in cka_rows] == ["1->2"]
    assert len(rep.select(metric="cps")) == 2
    assert sorted(r["block"] for r in rep.select(metric="mse")) == [1, 2]
    assert len(scatter) == 1 and scatter[0]["transition"] == (1, 2)
    assert all(r["regime"] == "simultaneous" and r["seed"] == 3
               for r in rep.rows)


def test_report_final_only_mse_single_row():
    model = tiny_model(layout="final_only")
    ds = build_dataset(grating_spec())
    emb = extract(model, ds)
    rep, _ = report_for_run(emb, "e2e", seed=0, metrics=("mse",),
                            model=model, dataset=ds)
    assert [r["block"] for r in rep.select(metric="mse")] == [2]


def test_report_input_requirements():
    model = tiny_model()
    ds = build_dataset(grating_spec())
    emb = extract(model, ds)  # no tokens retained
    with pytest.raises(ValueError, match="token"):
        report_for_run(emb, "e2e", seed=0, metrics=("cps",))
    with pytest.raises(ValueError, match="checkpoint and dataset"):
        report_for_run(emb, "e2e", seed=0, metrics=("mse",))
    flat = build_dataset(grating_spec(orientations=(45.0,)))
    with pytest.raises(ValueError, match="target"):
        report_for_run(extract(model, flat), "e2e", seed=0)


# --- charts -----------------------------------------------------------------------

def test_charts_are_wellformed_svg(tmp_path):
    series = {"sequential": ([1, 2, 3], [0.5, 0.6, 0.7]),
              "e2e": ([1, 2, 3], [0.4, 0.65, 0.72])}
    p1 = line_chart(tmp_path / "line.svg", series, title="probe", xlabel="block",
                    ylabel="acc")
    p2 = scatter_chart(tmp_path / "scatter.svg", {"a": ([0.9], [0.05])},
                       title="cka<scatter>")  # escaping check
    for p in (p1, p2):
        root = ElementTree.parse(p).getroot()
        assert root.tag.endswith("svg")
    svg = ElementTree.parse(p1).getroot()
    ns = "{http://www.w3.org/2000/svg}"
    assert len(svg.findall(f"{ns}polyline")) == 2
    assert len([c for c in svg.iter(f"{ns}circle")]) == 6


def test_chart_handles_flat_series(tmp_path):
    p = line_chart(tmp_path / "flat.svg", {"s": ([1, 2], [0.5, 0.5])})
    ElementTree.parse(p)
    with pytest.raises(ValueError, match="no data"):
        line_chart(tmp_path / "empty.svg", {"s": ([], [])})


# --- CLI ---------------------------------------------------------------------------

def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


def train_config(tmp_path, dataset_ref, regime="sequential", **regime_kw):
    doc = {
        "dataset": dataset_ref,
        "model": {"embed_dim": 32, "n_heads": 2, "K": 2, "n_layers": 2,
                  "mlp_ratio": 2.0, "tubelet": [4, 8, 8],
                  "decoder_depth": 1, "decoder_width": 16, "decoder_heads": 2},
        "regime": {"regime": regime, "epochs": 1, "batch_size": 5,
                   "base_lr": 1e-3, **regime_kw},
        "seed": 0,
    }
    return write_json(tmp_path / f"cfg_{regime}.json", doc)


def test_cli_synth_counts_and_rerun(tmp_path, capsys):
    spec = write_json(tmp_path / "spec.json",
                      grating_spec(count=100,
                                   orientations=(0.0, 45.0, 90.0, 135.0)))
    out = tmp_path / "ds"
    assert main(["synth", "--spec", str(spec), "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["counts"]["orientation"] == {
        "0.0": 25, "45.0": 25, "90.0": 25, "135.0": 25}

    assert main(["synth", "--spec", str(spec), "--out", str(out)]) == 2
    checksum = manifest["clips_checksum"]
    assert main(["--force", "synth", "--spec", str(spec), "--out", str(out)]) == 0
    again = json.loads((out / "manifest.json").read_text())
    assert again["clips_checksum"] == checksum

    assert main(["synth", "--spec", str(tmp_path / "nope.json"),
                 "--out", str(out)]) == 2
    assert "not found" in capsys.readouterr().err


def test_cli_train_extract_report_pipeline(tmp_path, capsys):
    spec = write_json(tmp_path / "spec.json", grating_spec(count=10))
    ds_dir = tmp_path / "ds"
    assert main(["synth", "--spec", str(spec), "--out", str(ds_dir)]) == 0

    cfg = train_config(tmp_path, str(ds_dir))
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(run)]) == 0
    log = (run / "train_log.csv").read_text().splitlines()
    stages = {row.split(",")[1] for row in log[1:]}
    assert stages == {"1", "2"}  # sequential K=2 logs both stages
    assert (run / "final.ckpt").exists()
    assert main(["train", "--config", str(cfg), "--out", str(run)]) == 2

    emb_path = tmp_path / "seq.emb"
    assert main(["extract", "--checkpoint", str(run / "final.ckpt"),
                 "--dataset", str(ds_dir), "--out", str(emb_path),
                 "--tokens"]) == 0
    emb = load_embeddings(emb_path)
    header = load_checkpoint(run / "final.ckpt")[1]
    assert emb.meta["K"] == header["config"]["K"]
    assert emb.meta["run_info"]["regime"] == "sequential"
    assert main(["extract", "--checkpoint", str(run / "final.ckpt"),
                 "--dataset", str(ds_dir), "--out", str(emb_path)]) == 2

    bad_ds = write_json(tmp_path / "bad.json", grating_spec(count=2, H=24))
    assert main(["extract", "--checkpoint", str(run / "final.ckpt"),
                 "--dataset", str(bad_ds), "--out",
                 str(tmp_path / "x.emb")]) == 2

    rep_dir = tmp_path / "report"
    assert main(["report", "--emb", f"sequential={emb_path}",
                 "--checkpoint", f"sequential={run / 'final.ckpt'}",
                 "--dataset", str(ds_dir),
                 "--metrics", "probe,map,cka,cps,mse",
                 "--out", str(rep_dir)]) == 0
    doc = json.loads((rep_dir / "report.json").read_text())
    csv_rep = MetricReport.read_csv(rep_dir / "report.csv")
    assert doc["totals"] == csv_rep.totals()
    assert len(doc["scatter"]["sequential"]) == 1  # K - 1 points
    svgs = sorted(rep_dir.glob("*.svg"))
    assert (rep_dir / "cka_vs_dmap.svg") in svgs
    for svg in svgs:
        ElementTree.parse(svg)
    # seed column came from the checkpoint's run provenance
    assert {r["seed"] for r in csv_rep.rows} == {0}

    assert main(["report", "--emb", f"sequential={emb_path}",
                 "--out", str(rep_dir)]) == 2  # refuses overwrite
    capsys.readouterr()


def test_cli_report_input_errors(tmp_path, capsys):
    spec = write_json(tmp_path / "spec.json", grating_spec(count=8))
    ds_dir = tmp_path / "ds"
    main(["synth", "--spec", str(spec), "--out", str(ds_dir)])
    cfg = train_config(tmp_path, str(ds_dir), regime="e2e")
    run = tmp_path / "run"
    main(["train", "--config", str(cfg), "--out", str(run)])
    emb_path = tmp_path / "e2e.emb"
    main(["extract", "--checkpoint", str(run / "final.ckpt"),
          "--dataset", str(ds_dir), "--out", str(emb_path)])

    assert main(["report", "--emb", f"e2e={emb_path}", "--metrics", "cps",
                 "--out", str(tmp_path / "r1")]) == 2
    assert "--tokens" in capsys.readouterr().err

    assert main(["report", "--emb", f"e2e={emb_path}", "--metrics", "mse",
                 "--dataset", str(ds_dir), "--out", str(tmp_path / "r2")]) == 2
    assert "--checkpoint" in capsys.readouterr().err

    assert main(["report", "--emb", "notapair", "--out",
                 str(tmp_path / "r3")]) == 2
    assert "REGIME=PATH" in capsys.readouterr().err


def test_cli_rejects_unknown_config_key(tmp_path, capsys):
    spec = grating_spec(count=4)
    cfg = write_json(tmp_path / "cfg.json", {
        "dataset": spec,
        "model": {"embed_dim": 32, "n_heads": 2, "K": 2, "n_layers": 2,
                  "tubelet": [4, 8, 8]},
        "regime": {"regime": "e2e", "epochs": 1, "batch_size": 4},
        "learning_rate": 1e-3,
    })
    assert main(["train", "--config", str(cfg), "--out",
                 str(tmp_path / "run")]) == 2
    assert "learning_rate" in capsys.readouterr().err

    cfg2 = write_json(tmp_path / "cfg2.json", {
        "dataset": spec,
        "model": {"embed_dim": 32, "n_heads": 2, "K": 2, "n_layers": 2,
                  "tubelet": [4, 8, 8]},
        "regime": {"regime": "e2e", "epochs": 1, "momentum": 0.9},
    })
    assert main(["train", "--config", str(cfg2), "--out",
                 str(tmp_path / "run2")]) == 2
    assert "momentum" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_train_divergence_exits_3(tmp_path, capsys):
    cfg = train_config(tmp_path, grating_spec(count=6), regime="simultaneous",
                       epochs=30, base_lr=1e30)
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(run)]) == 3
    err = capsys.readouterr().err
    assert "diverged" in err and str(run / "last_good.ckpt") in err
    assert (run / "last_good.ckpt").exists()


def test_cli_deterministic_reruns_are_bit_identical(tmp_path):
    spec = grating_spec(count=8)
    cfg = train_config(tmp_path, spec, regime="simultaneous", epochs=2,
                       batch_size=4)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--deterministic", "train", "--config", str(cfg),
                 "--out", str(a)]) == 0
    assert main(["--deterministic", "train", "--config", str(cfg),
                 "--out", str(b)]) == 0
    assert (a / "final.ckpt").read_bytes() == (b / "final.ckpt").read_bytes()
    assert (a / "train_log.csv").read_text() == (b / "train_log.csv").read_text()


def test_cli_seed_flag_overrides_config(tmp_path):
    spec = grating_spec(count=6)
    cfg = train_config(tmp_path, spec, regime="e2e", epochs=1, batch_size=3)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--seed", "7", "train", "--config", str(cfg),
                 "--out", str(a)]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(b)]) == 0
    ha = load_checkpoint(a / "final.ckpt")[1]["run_info"]
    hb = load_checkpoint(b / "final.ckpt")[1]["run_info"]
    assert ha["seed"] == 7 and hb["seed"] == 0
    assert (a / "final.ckpt").read_bytes() != (b / "final.ckpt").read_bytes()
