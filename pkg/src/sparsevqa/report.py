"""Accuracy evaluation, seed aggregation, and table/plot-data export.

The accuracy metric credits each example with the target score of the
predicted answer, which reduces to plain accuracy for one-hot targets.
Exports are a flat CSV (one row per recipe/sparsity/split/metric) and a
JSON bundle of accuracy-versus-sparsity curves, with published full-scale
reference numbers attached as a clearly labeled annotation layer.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .model import forward
from .pruning import MaskSet

METRIC_ORDER = ("overall", "yn", "num", "other")

# Published full-scale results quoted for context in exports; nothing at
# this scale is expected to reproduce them.
REFERENCE_FULL_SCALE = {
    "label": "published full-scale reference results, not reproduced at this scale",
    "full_model_plain": 48.01,
    "full_model_debiased": 63.55,
    "best_subnetwork_half_sparsity": 63.88,
}


@dataclass
class MetricsRecord:
    split: str
    overall: float
    per_type: dict
    counts: dict
    seed: Optional[int] = None
    sparsity_overall: Optional[float] = None

    def metrics(self) -> dict:
        out = {"overall": self.overall}
        out.update(self.per_type)
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        return cls(**d)


def evaluate(registry, dataset, masks=None, batch_size: int = 256,
             seed: Optional[int] = None) -> MetricsRecord:
    """Soft-score accuracy of the (optionally masked) model on a split."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty split")
    if isinstance(masks, MaskSet):
        masks = masks.as_tensors(requires_grad=False)
    arr = dataset.arrays()
    n = len(dataset)
    scores = np.empty(n)
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        out = forward(registry, arr["tokens"][lo:hi], arr["visual"][lo:hi],
                      masks=masks)
        pred = np.argmax(out.logits.data, axis=1)
        scores[lo:hi] = arr["targets"][lo:hi][np.arange(hi - lo), pred]
    qtypes = arr["qtypes"]
    per_type, counts = {}, {}
    for t in sorted(set(qtypes.tolist())):
        sel = qtypes == t
        per_type[t] = float(scores[sel].mean())
        counts[t] = int(sel.sum())
    return MetricsRecord(split=dataset.split, overall=float(scores.mean()),
                         per_type=per_type, counts=counts, seed=seed)


def aggregate(records) -> dict:
    """Per-metric mean and population std across seed records."""
    records = list(records)
    if not records:
        raise ValueError("need at least one record")
    splits = {r.split for r in records}
    if len(splits) != 1:
        raise ValueError(f"records mix splits: {sorted(splits)}")
    keys = set(records[0].metrics())
    for r in records[1:]:
        if set(r.metrics()) != keys:
            raise ValueError("records carry inconsistent metrics")
    out = {}
    for key in sorted(keys):
        vals = np.array([r.metrics()[key] for r in records])
        out[key] = {"mean": float(vals.mean()),
                    "std": float(vals.std()),
                    "n": len(vals)}
    return out


def gap(subnetwork: MetricsRecord, full_model: MetricsRecord) -> dict:
    """Per-metric delta, subnetwork minus full model, same split only."""
    if subnetwork.split != full_model.split:
        raise ValueError("gap requires records from the same split")
    sub, full = subnetwork.metrics(), full_model.metrics()
    return {k: sub[k] - full[k] for k in sub if k in full}


# ---------------------------------------------------------------------------
# run records and export


@dataclass
class RunRecord:
    recipe: str
    sparsity: dict
    seeds: list
    metrics: dict                      # split -> list of MetricsRecord dicts
    audits: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def records_for(self, split: str):
        return [MetricsRecord.from_dict(d) for d in self.metrics.get(split, [])]

    def aggregates(self) -> dict:
        return {split: aggregate(self.records_for(split))
                for split in self.metrics}

    def to_dict(self) -> dict:
        return {"recipe": self.recipe, "sparsity": self.sparsity,
                "seeds": self.seeds, "metrics": self.metrics,
                "audits": self.audits, "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(recipe=d["recipe"], sparsity=d["sparsity"], seeds=d["seeds"],
                   metrics=d["metrics"], audits=d.get("audits", []),
                   meta=d.get("meta", {}))


def flatten_rows(records) -> list:
    """One row per (recipe, sparsity, split, metric) with mean/std/count."""
    rows = []
    for rec in records:
        spars = json.dumps(rec.sparsity, sort_keys=True)
        for split, aggs in rec.aggregates().items():
            for metric in sorted(aggs, key=_metric_sort):
                stats = aggs[metric]
                rows.append({
                    "recipe": rec.recipe, "sparsity_config": spars,
                    "split": split, "metric": metric,
                    "mean": stats["mean"], "std": stats["std"],
                    "seed_count": stats["n"],
                })
    return rows


def _metric_sort(name: str):
    return (METRIC_ORDER.index(name) if name in METRIC_ORDER else len(METRIC_ORDER),
            name)


CSV_COLUMNS = ("recipe", "sparsity_config", "split", "metric",
               "mean", "std", "seed_count")


def export_csv(records, path):
    rows = flatten_rows(records)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([row["recipe"], row["sparsity_config"], row["split"],
                             row["metric"], repr(row["mean"]), repr(row["std"]),
                             row["seed_count"]])
    return path


def import_csv(path) -> list:
    """Parse rows back; numeric fields return as exact floats."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {header}")
        for raw in reader:
            rows.append({
                "recipe": raw[0], "sparsity_config": raw[1], "split": raw[2],
                "metric": raw[3], "mean": float(raw[4]), "std": float(raw[5]),
                "seed_count": int(raw[6]),
            })
    return rows


def curves_bundle(records) -> dict:
    """Accuracy-versus-sparsity curves grouped by recipe/split/metric."""
    curves = {}
    for rec in records:
        overall_s = rec.sparsity.get("overall", 0.0)
        node = curves.setdefault(rec.recipe, {})
        for split, aggs in rec.aggregates().items():
            snode = node.setdefault(split, {})
            for metric, stats in aggs.items():
                snode.setdefault(metric, []).append({
                    "sparsity": overall_s,
                    "sparsity_config": rec.sparsity,
                    "mean": stats["mean"], "std": stats["std"], "n": stats["n"],
                })
    for node in curves.values():
        for snode in node.values():
            for pts in snode.values():
                pts.sort(key=lambda p: p["sparsity"])
    return {"curves": curves, "annotations": {"reference_full_scale": REFERENCE_FULL_SCALE}}


def export_json(records, path):
    with open(path, "w") as fh:
        json.dump(curves_bundle(records), fh, indent=1)
    return path


def export(records, out_dir, basename: str = "results"):
    """Write both export formats; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = export_csv(records, os.path.join(out_dir, basename + ".csv"))
    json_path = export_json(records, os.path.join(out_dir, basename + ".json"))
    return csv_path, json_path


def render_text_table(records) -> str:
    rows = flatten_rows(records)
    header = ("recipe", "sparsity", "split", "metric", "mean", "std", "n")
    table = [header]
    for r in rows:
        table.append((r["recipe"], _short_sparsity(r["sparsity_config"]),
                      r["split"], r["metric"], f"{r['mean']:.4f}",
                      f"{r['std']:.4f}", str(r["seed_count"])))
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = []
    for i, row in enumerate(table):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _short_sparsity(config_json: str) -> str:
    cfg = json.loads(config_json)
    scheme = cfg.get("scheme", "uniform")
    if scheme == "modality-specific":
        return (f"{cfg['overall']:.2f} (L={cfg['s_language']:.2f} "
                f"R={cfg['s_visual']:.2f} X={cfg['s_cross']:.2f})")
    return f"{cfg.get('overall', 0.0):.2f} ({scheme})"
