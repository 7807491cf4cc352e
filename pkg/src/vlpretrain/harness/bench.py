"""Benchmark orchestration, ablations and embedding export."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from ..checkpoint import Checkpoint, load_checkpoint
from ..datamodel import load_manifest
from ..encoders import FEATURES, IMAGE_LABEL, SHARED, bank_from_prompts, bank_from_weights, encode_images
from ..objectives import KINDS
from ..transfer import (Protocol, Task, aggregate_reports, class_prompts, evaluate_task, load_task,
                        task_features)
from .config import TrainConfig
from .train import pretrain, prepare_data

log = logging.getLogger(__name__)

CELL_FIELDS = ("row", "checkpoint", "task", "protocol", "seed", "k_shots",
               "aca_base", "aca_novel", "aca_all", "status", "error")
ABLATIONS = ("feature_tap", "projections", "lambda_sweep", "data_scaling")


def fmt(x) -> str:
    """Fixed float formatting so reports are byte-stable."""
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def _as_tasks(tasks) -> dict:
    if isinstance(tasks, Mapping):
        items = tasks.items()
    else:
        items = ((Path(t).stem, t) for t in tasks)
    return {name: (t if isinstance(t, Task) else load_task(t)) for name, t in items}


def _as_checkpoints(checkpoints) -> dict:
    if isinstance(checkpoints, Mapping):
        items = checkpoints.items()
    else:
        items = ((Path(c).parent.name or Path(c).stem, c) for c in checkpoints)
    return {name: (c if isinstance(c, Checkpoint) else load_checkpoint(c)) for name, c in items}


def run_cells(checkpoints, tasks, protocols: Sequence[str], seeds: Sequence[int]) -> list[dict]:
    """Evaluate the full cross-product; a failing cell is recorded, not raised."""
    ckpts = _as_checkpoints(checkpoints)
    task_map = _as_tasks(tasks)
    rows = []
    for cname in sorted(ckpts):
        ck = ckpts[cname]
        for tname in sorted(task_map):
            task = task_map[tname]
            feats = None
            for proto in protocols:
                try:
                    if feats is None:
                        feats = task_features(ck, task)
                    reports = evaluate_task(ck, task, proto, seeds, cname, features=feats)
                except Exception as exc:  # per-cell failure
                    log.warning("cell %s/%s/%s failed: %s", cname, tname, proto, exc)
                    for seed in seeds:
                        rows.append({"row": "cell", "checkpoint": cname, "task": tname,
                                     "protocol": proto, "seed": seed, "k_shots": None,
                                     "aca_base": None, "aca_novel": None, "aca_all": None,
                                     "status": "error", "error": f"{type(exc).__name__}: {exc}"})
                    continue
                for r in reports:
                    rows.append({"row": "cell", "checkpoint": cname, "task": tname, "protocol": proto,
                                 "seed": r.seed, "k_shots": r.k_shots, "aca_base": r.aca_base,
                                 "aca_novel": r.aca_novel, "aca_all": r.aca_all, "status": "ok",
                                 "error": ""})
                agg = aggregate_reports(reports)
                for stat in ("mean", "std"):
                    rows.append({"row": stat, "checkpoint": cname, "task": tname, "protocol": proto,
                                 "seed": "", "k_shots": reports[0].k_shots,
                                 "aca_base": agg[f"aca_base_{stat}"], "aca_novel": agg[f"aca_novel_{stat}"],
                                 "aca_all": agg[f"aca_all_{stat}"], "status": "ok", "error": ""})
    return rows


def summary_table(rows: Sequence[dict], tasks: Mapping[str, Task]) -> list[dict]:
    """Per (checkpoint, protocol): base/novel ACA per task and the averaged columns.

    Avg B is the mean base ACA over tasks, Avg N the mean novel ACA over tasks
    with novel classes, and Avg the mean of the two.
    """
    means = [r for r in rows if r["row"] == "mean"]
    keys = sorted({(r["checkpoint"], r["protocol"]) for r in rows})
    table = []
    for ck, proto in keys:
        line = {"checkpoint": ck, "protocol": proto}
        bases, novels = [], []
        for tname in sorted(tasks):
            cell = next((r for r in means if (r["checkpoint"], r["protocol"], r["task"]) == (ck, proto, tname)), None)
            has_novel = any(tasks[tname].novel_flags)
            b = cell["aca_base"] if cell else None
            n = cell["aca_novel"] if cell else None
            line[f"{tname}:B"] = b
            if b is not None:
                bases.append(b)
            if has_novel:
                line[f"{tname}:N"] = n
                if n is not None:
                    novels.append(n)
        avg_b = float(np.mean(bases)) if bases else None
        avg_n = float(np.mean(novels)) if novels else None
        line["avg:B"] = avg_b
        line["avg:N"] = avg_n
        line["avg"] = (avg_b + avg_n) / 2 if (avg_b is not None and avg_n is not None) else None
        table.append(line)
    return table


def _write_csv(path: Path, rows: Sequence[dict], fields: Sequence[str]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: fmt(r.get(k)) for k in fields})
    path.write_bytes(buf.getvalue().encode("utf-8"))


def _write_json(path: Path, obj) -> None:
    path.write_bytes(json.dumps(obj, indent=1, sort_keys=True).encode("utf-8"))


def write_reports(out_dir, rows: Sequence[dict], tasks: Mapping[str, Task], stem: str = "benchmark") -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = summary_table(rows, tasks)
    fields = ["checkpoint", "protocol"] + sorted({k for line in table for k in line} - {"checkpoint", "protocol", "avg:B", "avg:N", "avg"}) + ["avg:B", "avg:N", "avg"]
    paths = {"cells_csv": out / f"{stem}.csv", "cells_json": out / f"{stem}.json",
             "summary_csv": out / f"{stem}_summary.csv"}
    _write_csv(paths["cells_csv"], rows, CELL_FIELDS)
    _write_json(paths["cells_json"], {"cells": list(rows), "summary": table})
    _write_csv(paths["summary_csv"], table, fields)
    return paths


def run_benchmark(checkpoints, tasks, protocols: Sequence[str], seeds: Sequence[int], out_dir,
                  stem: str = "benchmark") -> dict:
    """Cross-product evaluation; writes cell CSV/JSON and a summary table."""
    for p in protocols:
        Protocol.parse(p)
    task_map = _as_tasks(tasks)
    rows = run_cells(checkpoints, task_map, protocols, seeds)
    paths = write_reports(out_dir, rows, task_map, stem)
    return {"rows": rows, "paths": paths}


# -------------------------------------------------------------- ablations

def ablate(ablation: str, out_dir, *, checkpoints=None, config: Optional[TrainConfig] = None,
           manifests: Optional[Sequence] = None, tasks=None, seeds: Sequence[int] = (0,),
           k: int = 16, lambdas: Sequence[float] = (0.0, 0.1, 1.0, 10.0),
           objectives: Sequence[str] = KINDS, manifest_sets: Optional[Sequence[Sequence]] = None,
           protocols: Optional[Sequence[str]] = None) -> dict:
    """Run one ablation study and write its reports under ``out_dir``."""
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
    if tasks is None:
        raise ValueError(f"{ablation} needs tasks")
    out = Path(out_dir)
    task_map = _as_tasks(tasks)
    protocols = list(protocols or ["zero_shot", f"probe:{k}"])

    if ablation == "feature_tap":
        if not checkpoints:
            raise ValueError("feature_tap needs checkpoints")
        protos = [f"probe:{k}", f"probe:{k}:projected"]
        return run_benchmark(checkpoints, task_map, protos, seeds, out, "feature_tap")

    if config is None:
        raise ValueError(f"{ablation} needs a training config")
    if ablation in ("projections", "lambda_sweep") and not manifests:
        raise ValueError(f"{ablation} needs manifests")
    runs: dict = {}
    if ablation == "projections":
        base = dataclasses.replace(config, objective="dlilp")
        for label, heads in (("single", ("shared",)), ("dual", ("I-L", "I-T"))):
            cfg = dataclasses.replace(base, heads=heads)
            runs[f"dlilp-{label}"] = pretrain(cfg, manifests, out / "runs" / f"dlilp-{label}").checkpoint
    elif ablation == "lambda_sweep":
        if not lambdas:
            raise ValueError("lambda_sweep needs a lambda list")
        base = dataclasses.replace(config, objective="dlilp")
        for lam in lambdas:
            name = f"dlilp-lambda{lam:g}"
            runs[name] = pretrain(dataclasses.replace(base, lam=float(lam)), manifests,
                                  out / "runs" / name).checkpoint
    else:
        if not manifest_sets:
            raise ValueError("data_scaling needs a list of manifest sets")
        cache: dict = {}
        for mset in manifest_sets:
            tag = "+".join(Path(m).stem for m in mset)
            for kind in objectives:
                cfg = dataclasses.replace(config, objective=kind)
                name = f"{kind}-{tag}"
                data = prepare_data(mset, cfg, cache)
                runs[name] = pretrain(cfg, mset, out / "runs" / name, data=data).checkpoint
    result = run_benchmark(runs, task_map, protocols, seeds, out, ablation)
    result["runs"] = runs
    return result


# -------------------------------------------------------------- embeddings

def _prototype_bank(ck: Checkpoint, head: str):
    if ck.kind in ("unimodal", "dlilp"):
        return bank_from_weights(ck.state.W.detach().float(), ck.class_names,
                                 IMAGE_LABEL if head == IMAGE_LABEL else SHARED)
    return bank_from_prompts(ck.text, {c: class_prompts(c) for c in ck.class_names}, head)


def export_embeddings(checkpoint, manifest, out_path, tap: Optional[str] = None) -> Path:
    """Flat CSV: one row per image plus one marked row per class prototype."""
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    heads = ck.vision.head_names
    tap = tap or heads[0]
    if tap in (FEATURES, "pre_projection"):
        raise ValueError("prototypes live in a projection space; choose a projection tap "
                         f"from {heads}")
    if tap not in heads:
        raise KeyError(f"unknown tap {tap!r}; available: {heads}")
    if ck.kind in ("unimodal", "dlilp") and tap == "I-T":
        bank = bank_from_prompts(ck.text, {c: class_prompts(c) for c in ck.class_names}, tap)
    else:
        bank = _prototype_bank(ck, tap)
    ids, labels, images = [], [], []
    path = Path(manifest)
    if path.suffix == ".json":
        task = load_task(path)
        images = list(task.test_images)
        ids = [f"test/{i}" for i in range(len(images))]
        labels = [task.classes[int(y)] for y in task.test_labels]
    else:
        seen = set()
        class_names = load_manifest(path, load_images=False).catalog.names
        for s in load_manifest(path).samples:
            if s.image_ref in seen:
                continue
            seen.add(s.image_ref)
            ids.append(s.image_ref)
            names = [n for n, v in zip(class_names, s.image_labels) if v > 0]
            labels.append("|".join(names))
            images.append(s.image)
    emb = encode_images(ck.vision, np.stack(images), tap).double().numpy() if images else np.zeros((0, 0))
    protos = bank.matrix().double().numpy()
    dim = protos.shape[1]
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["marker", "id", "labels"] + [f"e{i}" for i in range(dim)])
    for i, lab, v in zip(ids, labels, emb):
        w.writerow(["sample", i, lab] + [repr(float(x)) for x in v])
    for name, v in zip(bank.names, protos):
        w.writerow(["prototype", name, name] + [repr(float(x)) for x in v])
    out.write_bytes(buf.getvalue().encode("utf-8"))
    return out


def read_embeddings(path) -> tuple[list[dict], np.ndarray]:
    """Inverse of export_embeddings: (row metadata, float64 matrix)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        meta, vecs = [], []
        for row in reader:
            meta.append({"marker": row[0], "id": row[1], "labels": row[2]})
            vecs.append([float(x) for x in row[3:]])
    return meta, np.asarray(vecs, dtype=np.float64)
