"""Command-line pipeline: synth -> train -> extract -> report.

Exit codes: 0 success, 2 usage/config error, 3 training divergence. The
--deterministic flag pins BLAS to one thread so reruns of the same config and
seed are bit-identical; --threads (or BWSSL_LAB_THREADS) caps parallelism
otherwise.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import charts
from .data import build_dataset, load_dataset, save_dataset
from .embeddings import EmbeddingIOError, extract, load_embeddings, save_embeddings
from .model import (CheckpointError, EncoderConfig, load_checkpoint)
from .report import MetricReport, report_for_run
from .training import RegimeConfig, TrainingDiverged, train

_CONFIG_KEYS = {"dataset", "model", "regime", "seed", "out"}
_LIMITER = None  # keeps the threadpool limit alive for the process


def _apply_threads(args):
    global _LIMITER
    n = getattr(args, "threads", None)
    if n is None:
        env = os.environ.get("BWSSL_LAB_THREADS")
        if env:
            n = int(env)
    if getattr(args, "deterministic", False) and n is None:
        n = 1
    if n is not None:
        if n < 1:
            raise ValueError(f"--threads must be >= 1, got {n}")
        from threadpoolctl import threadpool_limits
        _LIMITER = threadpool_limits(limits=n)


def _load_json(path, what):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} file not found: {p}")
    with open(p) as f:
        return json.load(f)


def _dataset_from(ref):
    """A dataset reference is a saved-dataset directory, a spec .json file,
    or an inline spec dict."""
    if isinstance(ref, dict):
        return build_dataset(ref)
    p = Path(ref)
    if p.is_dir():
        return load_dataset(p)
    return build_dataset(_load_json(p, "dataset spec"))


def _model_config(doc):
    doc = dict(doc)
    preset = doc.pop("preset", None)
    if preset is not None:
        base = {"tiny": EncoderConfig.tiny, "small": EncoderConfig.small}
        if preset not in base:
            raise ValueError(f"unknown model preset {preset!r}")
        merged = base[preset]().to_dict()
        merged.update(doc)
        doc = merged
    try:
        return EncoderConfig.from_dict(doc)
    except TypeError as exc:
        raise ValueError(f"bad model config: {exc}") from exc


# --- commands -----------------------------------------------------------------

def cmd_synth(args):
    spec = _load_json(args.spec, "dataset spec")
    ds = build_dataset(spec)
    save_dataset(ds, args.out, force=args.force)
    manifest = _load_json(Path(args.out) / "manifest.json", "manifest")
    print(f"wrote {args.out}: {manifest['n_clips']} clips, "
          f"checksum {manifest['clips_checksum']}")
    for name, counts in manifest["counts"].items():
        print(f"  {name}: {counts}")
    return 0


def cmd_train(args):
    doc = _load_json(args.config, "config")
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ValueError(f"unknown config key(s): {sorted(unknown)}")
    for key in ("dataset", "model", "regime"):
        if key not in doc:
            raise ValueError(f"config missing key {key!r}")

    ds = _dataset_from(doc["dataset"])
    model_config = _model_config(doc["model"])
    try:
        regime = RegimeConfig(**doc["regime"])
    except TypeError as exc:
        raise ValueError(f"bad regime config: {exc}") from exc
    if args.seed is not None:
        regime.seed = args.seed
    elif "seed" in doc:
        regime.seed = int(doc["seed"])

    out = Path(args.out or doc.get("out") or "")
    if not str(out):
        raise ValueError("no output directory (--out or config 'out')")
    if (out / "final.ckpt").exists() and not args.force:
        raise ValueError(f"{out / 'final.ckpt'} exists; pass --force to retrain")

    model, log = train(model_config, ds, regime, out_dir=out,
                       resume=args.resume)
    last = {}
    for r in log.rows:
        last[r["block"]] = r["loss"]
    losses = " ".join(f"block{k}={v:.5f}" for k, v in sorted(last.items()))
    print(f"trained {regime.regime} for {len(log.rows)} loss rows "
          f"({log.passes} dataset passes); final {losses}")
    print(f"checkpoint: {out / 'final.ckpt'}")
    return 0


def cmd_extract(args):
    model, header, _ = load_checkpoint(args.checkpoint)
    ds = _dataset_from(args.dataset)
    emb = extract(model, ds, keep_tokens=args.tokens)
    emb.meta["run_info"] = header.get("run_info")
    save_embeddings(args.out, emb, force=args.force)
    print(f"wrote {args.out}: K={emb.K} N={emb.n_clips} D={emb.dim} "
          f"tokens={'yes' if emb.H is not None else 'no'}")
    return 0


def _parse_tagged(pairs, what):
    """['sequential=path', ...] -> ordered {regime: path}"""
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ValueError(f"--{what} expects REGIME=PATH, got {item!r}")
        regime, path = item.split("=", 1)
        out[regime] = path
    return out


def _chart_series(report, metric, target):
    series = {}
    for r in report.rows:
        if r["metric"] != metric or r["target"] != target or r["value"] is None:
            continue
        xs, ys = series.setdefault(r["regime"], ([], []))
        xs.append(r["block"])
        ys.append(r["value"])
    return series


def cmd_report(args):
    embs = _parse_tagged(args.emb, "emb")
    if not embs:
        raise ValueError("no --emb inputs given")
    ckpts = _parse_tagged(args.checkpoint, "checkpoint")
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "report.csv"
    if csv_path.exists() and not args.force:
        raise ValueError(f"{csv_path} exists; pass --force to overwrite")

    dataset = _dataset_from(args.dataset) if args.dataset else None
    report = MetricReport()
    scatters = {}
    for regime, path in embs.items():
        emb = load_embeddings(path)
        run_info = emb.meta.get("run_info") or {}
        seed = args.seed if args.seed is not None else run_info.get("seed", 0)
        model = None
        if "mse" in metrics:
            if regime not in ckpts:
                raise ValueError(
                    f"metric 'mse' needs --checkpoint {regime}=PATH")
            model, _, _ = load_checkpoint(ckpts[regime])
        _, scatter = report_for_run(
            emb, regime, seed, report=report, metrics=metrics, model=model,
            dataset=dataset, mask_ratio=run_info.get("mask_ratio", 0.9))
        scatters[regime] = scatter

    report.to_csv(csv_path)
    report.to_json(out / "report.json", extras={"scatter": scatters})

    charts_written = []
    per_target = {"probe_acc": "accuracy", "map": "mAP"}
    flat = {"mse": "masked MSE", "cps": "CPS", "cka": "CKA"}
    seen = {(r["metric"], r["target"]) for r in report.rows}
    for metric, ylabel in per_target.items():
        for m, target in sorted(seen):
            if m != metric:
                continue
            series = _chart_series(report, metric, target)
            if series:
                p = out / f"{metric}_{target}.svg"
                charts.line_chart(p, series, title=f"{metric}: {target}",
                                  xlabel="block", ylabel=ylabel)
                charts_written.append(p)
    for metric, ylabel in flat.items():
        series = {}
        for target in {t for m, t in seen if m == metric}:
            for reg, pts in _chart_series(report, metric, target).items():
                xs, ys = series.setdefault(reg, ([], []))
                xs.extend(pts[0])
                ys.extend(pts[1])
        if series:
            p = out / f"{metric}.svg"
            charts.line_chart(p, series, title=metric,
                              xlabel="block" if metric != "cka" else "transition",
                              ylabel=ylabel)
            charts_written.append(p)
    if any(scatters.values()):
        series = {reg: ([r["cka"] for r in rows], [r["delta_map"] for r in rows])
                  for reg, rows in scatters.items() if rows}
        p = out / "cka_vs_dmap.svg"
        charts.scatter_chart(p, series, title="CKA vs change in retrieval mAP",
                             xlabel="CKA (k -> k+1)", ylabel="delta mAP")
        charts_written.append(p)

    print(f"wrote {csv_path} ({len(report.rows)} rows), report.json, "
          f"{len(charts_written)} charts")
    return 0


# --- parser -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="blockmae",
        description="Blockwise masked-autoencoding lab: synthesize grating "
                    "datasets, train under three regimes, extract per-block "
                    "embeddings, and report depth-resolved diagnostics.")
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS threads (default: env BWSSL_LAB_THREADS)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded numerics for bit-reproducible runs")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config/metadata seed")
    p.add_argument("--force", action="store_true",
                   help="overwrite existing outputs")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="materialize a synthetic grating dataset")
    s.add_argument("--spec", required=True, help="dataset spec JSON")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one regime from a config file")
    t.add_argument("--config", required=True, help="experiment config JSON")
    t.add_argument("--out", default=None, help="run directory")
    t.add_argument("--resume", default=None, help="mid-run checkpoint to resume")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="dump per-block embeddings")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True,
                   help="dataset directory or spec JSON")
    e.add_argument("--out", required=True, help="output .emb file")
    e.add_argument("--tokens", action="store_true",
                   help="retain token tensors (needed for CPS/occlusion)")
    e.set_defaults(func=cmd_extract)

    r = sub.add_parser("report", help="emit MetricReport CSV/JSON and charts")
    r.add_argument("--emb", action="append", metavar="REGIME=PATH",
                   help="embedding dump per regime (repeatable)")
    r.add_argument("--checkpoint", action="append", metavar="REGIME=PATH",
                   help="checkpoint per regime (needed for the MSE profile)")
    r.add_argument("--dataset", default=None,
                   help="dataset directory or spec JSON (for the MSE profile)")
    r.add_argument("--metrics", default="probe,map,cka",
                   help="comma list from probe,map,cka,cps,mse")
    r.add_argument("--out", required=True, help="report directory")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_threads(args)
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        if exc.checkpoint_path is not None:
            print(f"last good checkpoint: {exc.checkpoint_path}",
                  file=sys.stderr)
        return 3
    except (ValueError, KeyError, OSError, CheckpointError,
            EmbeddingIOError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
