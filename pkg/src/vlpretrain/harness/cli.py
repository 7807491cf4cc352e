"""Command line entry point: ``vlpretrain <command> [--config FILE] [--set key=value ...]``.

Every command reads its parameters from the config file (either at top level
or under a section named after the command), then applies ``--set``
overrides.  Relative output paths resolve under ``$VLPRETRAIN_OUTPUT_ROOT``
when it is set.  Failures print one JSON object to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

OUTPUT_ROOT_ENV = "VLPRETRAIN_OUTPUT_ROOT"
COMMANDS = ("generate", "pretrain", "zeroshot", "probe", "benchmark", "ablate", "export-embeddings")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def output_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _params(args) -> dict:
    from .config import load_config_file, parse_set

    params: dict = {}
    if args.config:
        data = load_config_file(args.config)
        section = data.get(args.command, data)
        if not isinstance(section, dict):
            raise UsageError(f"config section {args.command!r} must be a mapping")
        params.update(section)
    for key, value in parse_set(args.set or []).items():
        cur = params
        parts = key.split(".")
        for part in parts[:-1]:
            cur = cur.setdefault(part, {})
        cur[parts[-1]] = value
    return params


def _need(params: dict, key: str) -> Any:
    if key not in params or params[key] in (None, ""):
        raise UsageError(f"missing required parameter {key!r}")
    return params[key]


def _seeds(params: dict) -> list:
    seeds = params.get("seeds", [0])
    return [int(s) for s in (seeds if isinstance(seeds, (list, tuple)) else [seeds])]


def _emit(result: dict) -> None:
    print(json.dumps(result, indent=1, sort_keys=True, default=str))


# ---------------------------------------------------------------- commands

def cmd_generate(params: dict) -> dict:
    from ..synthgen import GeneratorConfig, generate_corpus

    out = output_path(_need(params, "out"))
    fields = {f.name for f in dataclasses.fields(GeneratorConfig)}
    unknown = set(params) - fields - {"out"}
    if unknown:
        raise UsageError(f"unknown generator parameters {sorted(unknown)}")
    kwargs = {k: (tuple(v) if isinstance(v, list) and k in ("base", "novel", "composed_constituents") else v)
              for k, v in params.items() if k != "out"}
    bundle = generate_corpus(GeneratorConfig(**kwargs), out)
    return {"root": str(bundle.root), "pretrain": {k: str(v) for k, v in bundle.pretrain.items()},
            "tasks": {k: str(v) for k, v in bundle.tasks.items()}}


def cmd_pretrain(params: dict) -> dict:
    from .config import train_config_from
    from .train import pretrain

    manifests = _need(params, "manifests")
    out = output_path(_need(params, "out"))
    section = {k: v for k, v in params.items() if k not in ("manifests", "out")}
    config = train_config_from(section)
    record = pretrain(config, list(manifests), out)
    return {"checkpoint": record.checkpoint, "best_epoch": record.best_epoch,
            "best_val_loss": record.best_val_loss, "config_hash": record.config_hash,
            "run_record": str(Path(out) / "run.json")}


def _single_eval(params: dict, protocol: str, stem: str) -> dict:
    from .bench import run_benchmark

    ckpt = _need(params, "checkpoint")
    task = _need(params, "task")
    out = output_path(params.get("out", stem))
    res = run_benchmark({Path(ckpt).parent.name or "checkpoint": ckpt}, [task], [protocol],
                        _seeds(params), out, stem)
    errors = [r["error"] for r in res["rows"] if r["status"] == "error"]
    if errors:
        raise RuntimeError(errors[0])
    return {"reports": {k: str(v) for k, v in res["paths"].items()},
            "aggregate": [r for r in res["rows"] if r["row"] == "mean"]}


def cmd_zeroshot(params: dict) -> dict:
    source = params.get("source", "name")
    protocol = "zero_shot" if source == "name" else f"zero_shot:{source}"
    return _single_eval(params, protocol, "zeroshot")


def cmd_probe(params: dict) -> dict:
    k = int(params.get("k", 16))
    tap = params.get("tap", "pre_projection")
    protocol = f"probe:{k}" + ("" if tap == "pre_projection" else f":{tap}")
    return _single_eval(params, protocol, "probe")


def cmd_benchmark(params: dict) -> dict:
    from .bench import run_benchmark

    res = run_benchmark(_need(params, "checkpoints"), _need(params, "tasks"),
                        params.get("protocols", ["zero_shot", "probe:16"]), _seeds(params),
                        output_path(params.get("out", "benchmark")))
    failed = sum(r["status"] == "error" for r in res["rows"])
    return {"reports": {k: str(v) for k, v in res["paths"].items()}, "failed_cells": failed}


def cmd_ablate(params: dict) -> dict:
    from .bench import ablate
    from .config import train_config_from

    kind = _need(params, "ablation")
    train = params.get("train")
    config = train_config_from(train) if train is not None else None
    kwargs = {k: params[k] for k in ("checkpoints", "manifests", "manifest_sets", "protocols",
                                     "objectives") if k in params}
    if "lambdas" in params:
        kwargs["lambdas"] = [float(x) for x in params["lambdas"]]
    if "k" in params:
        kwargs["k"] = int(params["k"])
    res = ablate(kind, output_path(params.get("out", f"ablate_{kind}")), config=config,
                 tasks=params.get("tasks"), seeds=_seeds(params), **kwargs)
    return {"reports": {k: str(v) for k, v in res["paths"].items()}, "runs": res.get("runs", {})}


def cmd_export(params: dict) -> dict:
    from .bench import export_embeddings

    path = export_embeddings(_need(params, "checkpoint"), _need(params, "manifest"),
                             output_path(params.get("out", "embeddings.csv")), params.get("tap"))
    return {"embeddings": str(path)}


HANDLERS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "zeroshot": cmd_zeroshot,
            "probe": cmd_probe, "benchmark": cmd_benchmark, "ablate": cmd_ablate,
            "export-embeddings": cmd_export}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vlpretrain", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a parameter (YAML value syntax); repeatable")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(json.dumps({"error": "UsageError", "message": str(exc), "command": None}) + "\n")
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = HANDLERS[args.command](_params(args))
    except Exception as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                     "command": args.command}, sort_keys=True) + "\n")
        return 2 if isinstance(exc, UsageError) else 1
    _emit(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
