"""End-to-end experiment: data, training, calibration, corruptions, OOD detection and oversmoothing."""

from __future__ import annotations

import csv
import datetime as _dt
import json
from dataclasses import asdict, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import torch

from .. import metrics as M
from ..gp_core import record_jitter
from ..transformer import (CGPTransformer, ModelConfig, ParamStore, derive_seed, history_dicts, model_forward,
                           predict, train)
from .config import RunConfig
from .datasets import CATEGORIES, OOD_SETS, CorruptionSpec, ToyDataset, corrupt, make_ood_images, make_toy_grammar, \
    make_toy_images

SCHEMA_VERSION = "1.0.0"
SCHEMA_FILE = "results.schema.json"


def load_schema() -> dict:
    return json.loads(resources.files("cgpt.harness").joinpath(SCHEMA_FILE).read_text())


def build_dataset(cfg: RunConfig) -> ToyDataset:
    d = cfg.dataset
    if d.kind == "images":
        return make_toy_images(d.classes, d.per_class, d.side, d.patch, cfg.seed)
    return make_toy_grammar(d.size, d.max_len, cfg.seed)


def effective_model_config(cfg: RunConfig, ds: ToyDataset) -> ModelConfig:
    """Model config with input and class counts taken from the dataset."""
    if ds.kind == "images":
        return replace(cfg.model, input_kind="patch", input_dim=ds.meta["patch"] ** 2, classes=ds.classes)
    return replace(cfg.model, input_kind="token", input_dim=ds.meta["vocab"], classes=2)


def effective_train_config(cfg: RunConfig):
    return replace(cfg.train, seed=derive_seed(cfg.seed, 1))


def _logits(model, x) -> np.ndarray:
    return predict(model, torch.as_tensor(x)).numpy()


def _report_dict(rep: M.CalibrationReport, with_bins: bool = True) -> dict:
    d = rep.to_dict()
    if not with_bins:
        d.pop("bins")
    return d


def _mean_reports(reports: list) -> dict:
    keys = ("accuracy", "mcc", "nll", "ece", "mce")
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}


def evaluate(model: CGPTransformer, ds: ToyDataset, cfg: RunConfig) -> dict:
    """Metric sections of results.json for a trained model."""
    bins = cfg.metrics.bins
    x_test, y_test = ds.split("test")
    clean_logits = _logits(model, x_test)
    out = {"clean": _report_dict(M.calibration(clean_logits, y_test, bins))}

    if ds.kind == "images":
        rows = {}
        for cat in CATEGORIES:
            reps = []
            for sev in cfg.metrics.severities:
                cds = corrupt(ds, CorruptionSpec(cat, sev, derive_seed(cfg.seed, 2, sev)))
                xc, yc = cds.split("test")
                reps.append(M.calibration(_logits(model, xc), yc, bins))
            rows[cat.value] = _mean_reports(reps)
        out["corruptions"] = rows
        out["distribution_shift"] = None
    else:
        xo, yo = ds.split("ood")
        out["corruptions"] = None
        out["distribution_shift"] = _report_dict(M.calibration(_logits(model, xo), yo, bins))

    out["ood"] = ood_section(model, ds, cfg, clean_logits) if cfg.metrics.ood and ds.kind == "images" else None

    k = min(cfg.metrics.oversmoothing_samples, len(x_test))
    with torch.no_grad():
        fo = model_forward(torch.as_tensor(x_test[:k]), model, "eval", regularize=False)
    out["oversmoothing"] = M.oversmoothing_probe([L.numpy() for L in fo.layer_outputs])
    return out


def ood_section(model: CGPTransformer, ds: ToyDataset, cfg: RunConfig, clean_logits=None) -> dict:
    """Detector metrics per outlier set, with the clean test split as in-distribution."""
    if ds.kind != "images":
        raise ValueError("OOD detection is defined for the image task")
    if clean_logits is None:
        clean_logits = _logits(model, ds.split("test")[0])
    x_val, _ = ds.split("val")
    templates = M.fit_kl_templates(_logits(model, x_val), ds.classes)
    return {name: M.ood_report(clean_logits, _logits(model, make_ood_images(ds, name, cfg.seed)),
                               templates).to_dict() for name in OOD_SETS}


def summarize_jitter(events: list) -> dict:
    levels: dict = {}
    for e in events:
        key = f"{e['jitter']:.0e}"
        levels[key] = levels.get(key, 0) + 1
    return {"count": len(events), "max": max((e["jitter"] for e in events), default=0.0),
            "by_level": dict(sorted(levels.items()))}


def flatten_results(res: dict) -> list[tuple]:
    """(section, name, metric, value) rows for results.csv."""
    rows = []
    for k, v in res["clean"].items():
        if k != "bins":
            rows.append(("clean", "", k, v))
    for cat, rep in (res["corruptions"] or {}).items():
        rows += [("corruption", cat, k, v) for k, v in rep.items()]
    if res["distribution_shift"]:
        rows += [("distribution_shift", "ood_split", k, v) for k, v in res["distribution_shift"].items() if k != "bins"]
    for name, dets in (res["ood"] or {}).items():
        for det, vals in dets.items():
            rows += [("ood", f"{name}/{det}", k, v) for k, v in vals.items()]
    rows += [("oversmoothing", f"layer{i}", "cosine", v) for i, v in enumerate(res["oversmoothing"])]
    for h in res["history"]:
        for k in ("alpha", "task_loss", "regularizer", "train_accuracy", "val_accuracy"):
            rows.append(("history", f"epoch{h['epoch']}", k, h[k]))
    return rows


def write_results(res: dict, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    jsonschema.validate(res, load_schema())
    (out_dir / "results.json").write_text(json.dumps(res, sort_keys=True, indent=2))
    with open(out_dir / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["section", "name", "metric", "value"])
        for r in flatten_results(res):
            w.writerow([r[0], r[1], r[2], "" if r[3] is None else repr(float(r[3]))])


def train_model(cfg: RunConfig, ds: ToyDataset | None = None, log=None):
    ds = ds or build_dataset(cfg)
    model_cfg = effective_model_config(cfg, ds)
    model, history = train(model_cfg, effective_train_config(cfg), ds, log=log)
    return model, history, ds


def run(cfg: RunConfig, *, out_dir: str | Path | None = None, log=None, timestamp: str | None = None) -> dict:
    """Train per config and emit results.json, results.csv, config.json and a checkpoint.

    Everything except the ``timestamp`` field is a deterministic function of
    the config.
    """
    out = Path(out_dir or cfg.out_dir)
    with record_jitter() as events:
        model, history, ds = train_model(cfg, log=log)
        metrics = evaluate(model, ds, cfg)
    res = {
        "schema_version": SCHEMA_VERSION,
        "timestamp": timestamp or _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "model": asdict(model.cfg),
        "parameter_count": ParamStore(model).count(),
        "jitter": summarize_jitter(events),
        "history": history_dicts(history),
        **metrics,
    }
    write_results(res, out)
    (out / "config.json").write_text(cfg.to_json())
    ParamStore(model).save(out / "model.ckpt")
    return res


def load_trained(out_dir: str | Path):
    """Rebuild the model saved by :func:`run` together with its config and dataset."""
    out = Path(out_dir)
    cfg = RunConfig.load(out / "config.json")
    ds = build_dataset(cfg)
    model = CGPTransformer(effective_model_config(cfg, ds), 0)
    ParamStore(model).load(out / "model.ckpt")
    model.eval()
    return model, cfg, ds
