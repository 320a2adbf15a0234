"""Depth-resolved metric tables: assembly, CSV/JSON serialization, totals.

A report is a flat table with one row per (regime, model, K, block, metric,
target) cell. The CSV is the canonical artifact; the JSON mirror carries the
same rows plus aggregate totals and the CKA-vs-delta-mAP scatter points.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import diagnostics as dx

COLUMNS = ("regime", "model", "K", "block", "metric", "target", "value", "seed")


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)

    def add(self, regime, model, K, block, metric, target, value, seed):
        self.rows.append({
            "regime": regime, "model": model, "K": int(K), "block": int(block),
            "metric": metric, "target": target,
            "value": None if value is None else float(value), "seed": int(seed),
        })

    def select(self, **where):
        return [r for r in self.rows
                if all(r[k] == v for k, v in where.items())]

    def totals(self):
        agg = {}
        for r in self.rows:
            if r["value"] is None:
                continue
            agg.setdefault(r["metric"], []).append(r["value"])
        return {"n_rows": len(self.rows),
                "metrics": {m: {"count": len(v), "mean": float(np.mean(v))}
                            for m, v in sorted(agg.items())}}

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(COLUMNS)
            for r in self.rows:
                w.writerow([r["regime"], r["model"], r["K"], r["block"],
                            r["metric"], r["target"],
                            "" if r["value"] is None else repr(r["value"]),
                            r["seed"]])

    def to_json(self, path, extras=None):
        doc = {"columns": list(COLUMNS), "rows": self.rows,
               "totals": self.totals()}
        if extras:
            doc.update(extras)
        with open(path, "w") as f:
            json.dump(doc, f, indent=1, sort_keys=True)

    @classmethod
    def read_csv(cls, path):
        rep = cls()
        with open(path, newline="") as f:
            for r in csv.DictReader(f):
                rep.add(r["regime"], r["model"], int(r["K"]), int(r["block"]),
                        r["metric"], r["target"],
                        None if r["value"] == "" else float(r["value"]),
                        int(r["seed"]))
        return rep


def model_name(config_dict):
    return (f"vit-d{config_dict['embed_dim']}"
            f"-l{config_dict['n_layers']}-k{config_dict['K']}")


def probing_targets(labels):
    """Targets worth probing: more than one distinct label value."""
    return [name for name, vals in labels.items() if len(set(vals)) > 1]


def report_for_run(emb, regime, seed, report=None, metrics=("probe", "map", "cka"),
                   model=None, dataset=None, targets=None, mask_ratio=0.9,
                   cps_max_clips=64, C=1.0, max_iter=1000):
    """Append one regime's rows to a MetricReport; returns (report, scatter).

    probe/map/cka/cps come from the EmbeddingSet alone (cps needs retained
    token tensors); the reconstruction-MSE profile additionally needs the
    model and dataset. The scatter pairs each block transition's CKA with the
    retrieval-mAP change of the first probing target.
    """
    report = MetricReport() if report is None else report
    K = emb.K
    name = model_name(emb.meta["model_config"])
    labels = emb.meta["labels"]
    folds = emb.meta["folds"]
    if targets is None:
        targets = probing_targets(labels)
    if not targets:
        raise ValueError("no probing target has more than one label value")

    def add(block, metric, target, value):
        report.add(regime, name, K, block, metric, target, value, seed)

    if "probe" in metrics:
        for t in targets:
            y = np.asarray(labels[t])
            f = np.asarray(folds[t])
            for k in range(K):
                res = dx.probe_cv(emb.X[k], y, f, target=t, C=C,
                                  max_iter=max_iter)
                add(k + 1, "probe_acc", t, res.accuracy)

    maps = {}
    if "map" in metrics or "cka" in metrics:
        for t in targets:
            y = np.asarray(labels[t])
            maps[t] = [dx.knn_map(emb.X[k], y) for k in range(K)]
            if "map" in metrics:
                for k in range(K):
                    add(k + 1, "map", t, maps[t][k])

    ckas = []
    scatter = []
    if "cka" in metrics and K > 1:
        ckas = [dx.cka(emb.X[k], emb.X[k + 1]) for k in range(K - 1)]
        for k, v in enumerate(ckas):
            add(k + 1, "cka", f"{k + 1}->{k + 2}", v)
        scatter = dx.pair_cka_dmap(maps[targets[0]], ckas)

    if "cps" in metrics:
        if emb.H is None:
            raise ValueError(
                "CPS needs token tensors; re-extract with token retention "
                "enabled (--tokens)")
        for k in range(K):
            res = dx.cps(emb.H[k], max_clips=cps_max_clips, seed=seed)
            add(k + 1, "cps", "", res.value)

    if "mse" in metrics:
        if model is None or dataset is None:
            raise ValueError(
                "reconstruction MSE needs the checkpoint and dataset")
        prof = dx.recon_mse_profile(model, dataset, mask_ratio=mask_ratio,
                                    seed=seed)
        for k, v in sorted(prof.items()):
            add(k, "mse", "", v)

    return report, scatter
