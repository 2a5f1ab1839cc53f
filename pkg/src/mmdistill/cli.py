"""Command-line entry point: ``mmdistill {gen-data,distill,eval,sweep,report}``.

Every subcommand accepts ``--config FILE`` (JSON with optional sections
``data``, ``distill``, ``eval``, ``paths`` and an ``out`` key); explicit flags
override config keys. The fully resolved config is written to the output directory.
Failures exit nonzero with a single ``error: <kind>: <message>`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import dataio, distill as dist, evaluate, sweep
from .models import ARCHS

log = logging.getLogger("mmdistill")

SECTIONS = {"data": dataio.GenSpec, "distill": dist.DistillConfig, "eval": evaluate.EvalConfig}
PATH_KEYS = ("data", "distilled")


class CLIError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError("usage", message)


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CLIError("missing-path", f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CLIError("bad-config", f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(cfg, dict):
        raise CLIError("bad-config", f"{p}: top level must be an object")
    check_keys(cfg)
    return cfg


def check_keys(cfg: dict) -> None:
    unknown = sorted(set(cfg) - set(SECTIONS) - {"out", "paths"})
    if unknown:
        raise CLIError("bad-config", f"unknown config keys: {', '.join(unknown)}")
    paths = cfg.get("paths", {})
    if not isinstance(paths, dict) or set(paths) - set(PATH_KEYS):
        raise CLIError("bad-config", f"'paths' may only contain {', '.join(PATH_KEYS)}")
    for name, cls in SECTIONS.items():
        section = cfg.get(name, {})
        if not isinstance(section, dict):
            raise CLIError("bad-config", f"section {name!r} must be an object")
        valid = {f.name for f in fields(cls)}
        bad = sorted(set(section) - valid)
        if bad:
            raise CLIError("bad-config", f"unknown keys in {name!r}: {', '.join(bad)}")


def build(cls, section: dict, overrides: dict):
    values = dict(section)
    values.update({k: v for k, v in overrides.items() if v is not None})
    for f in fields(cls):
        if f.name in values and isinstance(getattr(cls(), f.name), tuple):
            values[f.name] = tuple(values[f.name])
    obj = cls(**values)
    try:
        obj.validate()
    except ValueError as exc:
        raise CLIError("bad-config", str(exc)) from None
    return obj


def resolve_out(args, cfg: dict) -> Path:
    out = args.out or cfg.get("out")
    if not out:
        raise CLIError("usage", "an output directory is required (--out or config 'out')")
    return Path(out)


def _path(flag, cfg: dict, key: str):
    return flag if flag is not None else cfg.get("paths", {}).get(key)


def echo_config(out: Path, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _load_dataset(path) -> dataio.Dataset:
    if path is None:
        raise CLIError("usage", "--data is required")
    p = Path(path)
    if not (p / "manifest.json").exists() and not p.is_file():
        raise CLIError("missing-path", f"dataset not found: {p}")
    return dataio.load(p)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    spec = build(dataio.GenSpec, cfg.get("data", {}), {
        "num_classes": args.classes, "size": args.size, "clutter": args.clutter,
        "clutter_density": args.density, "caption_noise": args.sigma, "seed": args.seed,
        "train_per_class": args.train_per_class, "test_per_class": args.test_per_class,
        "name": args.name,
    })
    out = resolve_out(args, cfg)
    dataio.generate(spec, out)
    echo_config(out, {"data": asdict(spec)})
    print(out)
    return 0


def cmd_distill(args) -> int:
    cfg = load_config(args.config)
    full = None if args.masked_full_term is None else args.masked_full_term == "on"
    dcfg = build(dist.DistillConfig, cfg.get("distill", {}), {
        "method": args.method, "ipc": args.ipc, "iterations": args.iters, "batch_real": args.batch_real,
        "lambda1": args.lambda1, "lambda2": args.lambda2, "masked_full_term": full,
        "grad_distance": args.grad_distance, "net_width": args.net_width, "seed": args.seed,
    })
    out = resolve_out(args, cfg)
    data = _path(args.data, cfg, "data")
    ds = _load_dataset(data)
    if dcfg.method.startswith("masked") and ds.meta.get("gen", {}).get("clutter") == "none":
        log.warning("masked method %s on a clutter-free dataset; masking has nothing to remove", dcfg.method)
    result = dist.distill(ds, dcfg)
    tensors, header = dist.synthetic_to_container(result)
    dataio.write_container(out, tensors, header)
    evaluate.write_csv(out / "trace.csv", ["iteration", "loss"],
                       [[i, repr(v)] for i, v in enumerate(result.trace)])
    echo_config(out, {"distill": asdict(dcfg), "paths": {"data": str(data)}})
    print(out)
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    archs = None if args.archs is None else tuple(a for a in args.archs.split(",") if a)
    baselines = None
    if args.baselines is not None:
        baselines = tuple(b for b in args.baselines.split(",") if b and b != "none")
    ecfg = build(evaluate.EvalConfig, cfg.get("eval", {}), {
        "archs": archs, "num_seeds": args.seeds, "epochs": args.epochs, "width": args.width,
        "use_captions": True if args.use_captions else None, "baselines": baselines, "seed": args.seed,
    })
    out = resolve_out(args, cfg)
    data = _path(args.data, cfg, "data")
    ds = _load_dataset(data)
    distilled = _path(args.distilled, cfg, "distilled")
    if distilled is None:
        raise CLIError("usage", "--distilled is required")
    dpath = Path(distilled)
    if not (dpath / "manifest.json").exists():
        raise CLIError("missing-path", f"distilled set not found: {dpath}")
    manifest, arrays = dataio.read_container(dpath)
    syn, _ = dist.synthetic_from_container(manifest, arrays)
    method = args.method or manifest.get("config", {}).get("method", "distilled")
    report = evaluate.run_protocol(ds, syn, ecfg, method=method)
    report.write(out)
    echo_config(out, {"eval": asdict(ecfg), "paths": {"data": str(data), "distilled": str(dpath)}})
    sys.stdout.write(report.summary())
    return 0


def cmd_sweep(args) -> int:
    if args.config is None:
        raise CLIError("usage", "sweep needs --config")
    p = Path(args.config)
    if not p.exists():
        raise CLIError("missing-path", f"config file not found: {p}")
    try:
        spec = sweep.SweepSpec.from_dict(json.loads(p.read_text()))
    except json.JSONDecodeError as exc:
        raise CLIError("bad-config", f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    except (ValueError, TypeError, KeyError) as exc:
        raise CLIError("bad-config", str(exc)) from None
    out = Path(args.out or spec.out or "")
    if not str(out) or str(out) == ".":
        raise CLIError("usage", "an output directory is required (--out or config 'out')")
    summary = sweep.run_sweep(spec, out, resume=args.resume, workers=args.workers)
    sys.stdout.write(summary.table)
    if summary.failed:
        raise CLIError("cell-failed", f"{len(summary.failed)} of {summary.total} cells failed: "
                                      + ", ".join(summary.failed))
    return 0


def cmd_report(args) -> int:
    src = Path(args.input)
    if not src.exists():
        raise CLIError("missing-path", f"report input not found: {src}")
    if (src / "cells").is_dir():
        table = sweep.aggregate_sweep(src)
        sys.stdout.write(table)
        return 0
    if not (src / "per_seed.csv").exists():
        raise CLIError("missing-path", f"no per_seed.csv or cells/ under {src}")
    report = evaluate.EvalReport.read(src)
    report.write(src)
    sys.stdout.write(report.summary())
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _on_off(v: str) -> str:
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on or off, got {v!r}")
    return v


def make_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mmdistill", description="Desk-scale multi-modal dataset distillation.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate the clutter toy dataset")
    g.add_argument("--config")
    g.add_argument("--classes", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--clutter", choices=("none", "distractors"))
    g.add_argument("--density", type=float)
    g.add_argument("--sigma", type=float, help="caption embedding noise")
    g.add_argument("--train-per-class", type=int)
    g.add_argument("--test-per-class", type=int)
    g.add_argument("--name")
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    d = sub.add_parser("distill", help="distill a synthetic set")
    d.add_argument("--config")
    d.add_argument("--data")
    d.add_argument("--method", choices=dist.METHODS)
    d.add_argument("--ipc", type=int)
    d.add_argument("--iters", type=int)
    d.add_argument("--batch-real", type=int)
    d.add_argument("--lambda1", type=float)
    d.add_argument("--lambda2", type=float)
    d.add_argument("--masked-full-term", type=_on_off)
    d.add_argument("--grad-distance", choices=dist.DISTANCES)
    d.add_argument("--net-width", type=int)
    d.add_argument("--seed", type=int)
    d.add_argument("--out")
    d.set_defaults(func=cmd_distill)

    e = sub.add_parser("eval", help="train fresh classifiers on a distilled set")
    e.add_argument("--config")
    e.add_argument("--data")
    e.add_argument("--distilled")
    e.add_argument("--archs", help=f"comma list from {','.join(ARCHS)}")
    e.add_argument("--seeds", type=int, help="number of evaluation seeds")
    e.add_argument("--seed", type=int, help="first evaluation seed")
    e.add_argument("--epochs", type=int)
    e.add_argument("--width", type=int)
    e.add_argument("--use-captions", action="store_true")
    e.add_argument("--baselines", help="comma list, or 'none'")
    e.add_argument("--method", help="label for the distilled rows")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="run a method x dataset x lambda x seed grid")
    s.add_argument("--config")
    s.add_argument("--out")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="re-aggregate an eval or sweep directory")
    r.add_argument("input")
    r.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except CLIError as exc:
        kind, msg = exc.kind, str(exc)
    except FileNotFoundError as exc:
        kind, msg = "missing-path", str(exc)
    except dataio.DataFormatError as exc:
        kind, msg = "bad-data", str(exc)
    except (dist.DistillError, evaluate.EvalError, FloatingPointError) as exc:
        kind, msg = "run-failed", str(exc)
    except ValueError as exc:
        kind, msg = "bad-config", str(exc)
    print(f"error: {kind}: {' '.join(msg.split())}", file=sys.stderr)
    return 2 if kind == "usage" else 1


if __name__ == "__main__":
    sys.exit(main())
