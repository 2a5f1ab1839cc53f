"""Grid runner: datasets x methods x lambda settings x seeds.

Each cell distills one synthetic set and evaluates it with one evaluation
seed (the cell seed). Cells are keyed by a hash of their fully resolved
config, so ``resume`` skips anything already finished.

Layout of the output directory::

    datasets/<name>/          generated datasets (shared by cells)
    cells/<hash>/             config.json, trace.csv, result.csv, distilled container
    aggregate.csv             label, dataset, arch, mean, std, n
    table.md                  label x dataset, "mean±std" in accuracy points
    traces/<label>__<dataset>.csv, traces/loss.svg
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import dataio, distill as dist, evaluate

log = logging.getLogger(__name__)

RESULT_COLUMNS = ["label", "method", "dataset", "arch", "seed", "accuracy"]


@dataclass
class SweepSpec:
    methods: list
    seeds: list
    datasets: dict = field(default_factory=lambda: {"toy": {}})
    lambda_grid: list = field(default_factory=lambda: [{}])
    distill: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    out: str | None = None
    workers: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        valid = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - valid)
        if unknown:
            raise ValueError(f"unknown sweep keys: {', '.join(unknown)}")
        for key in ("methods", "seeds"):
            if key not in d:
                raise ValueError(f"sweep config needs {key!r}")
        spec = cls(**d)
        spec.validate()
        return spec

    def validate(self) -> None:
        if not self.methods or not self.seeds or not self.datasets or not self.lambda_grid:
            raise ValueError("methods, seeds, datasets and lambda_grid must be non-empty")
        bad = [m for m in self.methods if m not in dist.METHODS]
        if bad:
            raise ValueError(f"unknown method(s) {bad}; valid methods: {', '.join(dist.METHODS)}")
        for point in self.lambda_grid:
            extra = set(point) - {"lambda1", "lambda2"}
            if extra:
                raise ValueError(f"lambda_grid entries may only set lambda1/lambda2, got {sorted(extra)}")
        for name, gen in self.datasets.items():
            _gen_spec(name, gen).validate()
        for c in self.cells():
            c.distill_cfg.validate()
            c.eval_cfg.validate()

    def cells(self) -> list:
        out = []
        for ds_name, gen in self.datasets.items():
            for method in self.methods:
                for point in self.lambda_grid:
                    label = method
                    if len(self.lambda_grid) > 1:
                        label += "[" + ",".join(f"{k}={point[k]:g}" for k in sorted(point)) + "]"
                    for seed in self.seeds:
                        dcfg = dist.DistillConfig(**{**self.distill, **point, "method": method, "seed": int(seed)})
                        ev = {"num_seeds": 1, "baselines": (), **self.eval, "seed": int(seed)}
                        if method == "cap_cat":
                            ev["use_captions"] = True
                        ev = {k: tuple(v) if isinstance(v, list) else v for k, v in ev.items()}
                        out.append(Cell(label, ds_name, _gen_spec(ds_name, gen), dcfg,
                                        evaluate.EvalConfig(**ev)))
        return out


def _gen_spec(name: str, overrides: dict) -> dataio.GenSpec:
    return dataio.GenSpec(**{"name": name, **overrides})


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Cell:
    label: str
    dataset: str
    gen: dataio.GenSpec
    distill_cfg: dist.DistillConfig
    eval_cfg: evaluate.EvalConfig

    def config(self) -> dict:
        return {"label": self.label, "data": asdict(self.gen), "distill": asdict(self.distill_cfg),
                "eval": asdict(self.eval_cfg)}

    @property
    def key(self) -> str:
        return config_hash(self.config())


@dataclass
class SweepSummary:
    total: int
    ran: int
    skipped: int
    failed: list
    table: str


def _dataset_dir(out: Path, gen: dataio.GenSpec) -> Path:
    return out / "datasets" / f"{gen.name}-{config_hash(asdict(gen))[:8]}"


def _run_cell(cell: Cell, out: str) -> tuple[str, str | None]:
    """Worker entry point; returns (key, error or None)."""
    root = Path(out)
    cdir = root / "cells" / cell.key
    try:
        cdir.mkdir(parents=True, exist_ok=True)
        (cdir / "config.json").write_text(json.dumps(cell.config(), indent=2, sort_keys=True) + "\n")
        ds = dataio.load(_dataset_dir(root, cell.gen))
        result = dist.distill(ds, cell.distill_cfg)
        tensors, header = dist.synthetic_to_container(result)
        dataio.write_container(cdir / "distilled", tensors, header)
        evaluate.write_csv(cdir / "trace.csv", ["iteration", "loss"],
                           [[i, repr(v)] for i, v in enumerate(result.trace)])
        report = evaluate.run_protocol(ds, result.synthetic, cell.eval_cfg, method=cell.distill_cfg.method)
        rows = [[cell.label, r["method"], cell.dataset, r["arch"], r["seed"], repr(r["accuracy"])]
                for r in report.rows]
        tmp = cdir / "result.csv.tmp"
        evaluate.write_csv(tmp, RESULT_COLUMNS, rows)
        tmp.replace(cdir / "result.csv")   # result.csv marks the cell complete
        (cdir / "error.txt").unlink(missing_ok=True)
        return cell.key, None
    except Exception as exc:  # a failed cell must not stop the sweep
        (cdir / "error.txt").write_text(traceback.format_exc())
        return cell.key, f"{type(exc).__name__}: {exc}"


def worker_count(requested: int | None) -> int:
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("MMDISTILL_WORKERS")
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def run_sweep(spec: SweepSpec, out, resume: bool = False, workers: int | None = None) -> SweepSummary:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")
    for gen in {c.dataset: c.gen for c in spec.cells()}.values():
        ddir = _dataset_dir(out, gen)
        if not (ddir / "manifest.json").exists():
            dataio.generate(gen, ddir)

    cells = spec.cells()
    todo = [c for c in cells if not (resume and (out / "cells" / c.key / "result.csv").exists())]
    n = worker_count(workers or spec.workers)
    log.info("sweep: %d cells, %d to run, %d workers", len(cells), len(todo), n)
    if n == 1 or len(todo) <= 1:
        results = [_run_cell(c, str(out)) for c in todo]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_run_cell, todo, [str(out)] * len(todo)))
    by_key = {c.key: c for c in todo}
    failed = []
    for key, err in results:
        if err is not None:
            c = by_key[key]
            failed.append(f"{c.label}/{c.dataset}/seed{c.distill_cfg.seed}")
            log.error("cell %s failed: %s", key, err)
    table = aggregate_sweep(out, keys=[c.key for c in cells])
    return SweepSummary(len(cells), len(todo), len(cells) - len(todo), failed, table)


def read_cell_rows(out, keys=None) -> list:
    root = Path(out) / "cells"
    dirs = sorted(root.iterdir()) if keys is None else [root / k for k in keys]
    rows = []
    for d in dirs:
        path = d / "result.csv"
        if not path.exists():
            continue
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                r["seed"] = int(r["seed"])
                r["accuracy"] = float(r["accuracy"])
                r["cell"] = d.name
                rows.append(r)
    return rows


def aggregate_rows(rows: list) -> list:
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["label"], r["dataset"], r["arch"]), []).append(r["accuracy"])
    out = []
    for (label, ds, arch), accs in groups.items():
        m, s = evaluate.mean_std(accs)
        out.append({"label": label, "dataset": ds, "arch": arch, "mean": m, "std": s, "n": len(accs)})
    return out


def markdown_table(agg: list) -> str:
    blocks = []
    for arch in dict.fromkeys(a["arch"] for a in agg):
        sub = [a for a in agg if a["arch"] == arch]
        labels = list(dict.fromkeys(a["label"] for a in sub))
        datasets = list(dict.fromkeys(a["dataset"] for a in sub))
        cell = {(a["label"], a["dataset"]): f"{100 * a['mean']:.2f}±{100 * a['std']:.2f}" for a in sub}
        lines = [f"accuracy (%) on {arch}", "",
                 "| method | " + " | ".join(datasets) + " |",
                 "|---|" + "---|" * len(datasets)]
        for lab in labels:
            lines.append(f"| {lab} | " + " | ".join(cell.get((lab, d), "-") for d in datasets) + " |")
        blocks.append("\n".join(lines) + "\n")
    return "\n".join(blocks)


def aggregate_sweep(out, keys=None) -> str:
    """Rebuild aggregate.csv, table.md and loss-trace files from per-cell outputs."""
    out = Path(out)
    if keys is None and (out / "sweep.json").exists():
        # keep the spec's cell order so a re-aggregation is byte-identical
        spec = SweepSpec.from_dict(json.loads((out / "sweep.json").read_text()))
        keys = [c.key for c in spec.cells()]
    rows = read_cell_rows(out, keys)
    agg = aggregate_rows(rows)
    evaluate.write_csv(out / "aggregate.csv", ["label", "dataset", "arch", "mean", "std", "n"],
                       [[a["label"], a["dataset"], a["arch"], repr(a["mean"]), repr(a["std"]), a["n"]]
                        for a in agg])
    table = markdown_table(agg)
    (out / "table.md").write_text(table)
    write_traces(out, rows)
    return table


def write_traces(out: Path, rows: list) -> None:
    series: dict = {}
    for r in rows:
        series.setdefault((r["label"], r["dataset"]), {})[r["seed"]] = r["cell"]
    tdir = out / "traces"
    tdir.mkdir(exist_ok=True)
    curves = {}
    for (label, ds), cells in series.items():
        seeds = sorted(cells)
        traces = []
        for s in seeds:
            with open(out / "cells" / cells[s] / "trace.csv", newline="") as fh:
                traces.append([float(r["loss"]) for r in csv.DictReader(fh)])
        n = min(len(t) for t in traces)
        name = f"{label}__{ds}".replace("/", "_")
        evaluate.write_csv(tdir / f"{name}.csv", ["iteration"] + [f"seed_{s}" for s in seeds],
                           [[i] + [repr(t[i]) for t in traces] for i in range(n)])
        curves[f"{label} / {ds}"] = np.mean([t[:n] for t in traces], axis=0)
    (tdir / "loss.svg").write_text(line_chart_svg(curves))


def line_chart_svg(curves: dict, width: int = 640, height: int = 360) -> str:
    """Minimal static SVG: one polyline per curve, each normalised to its own range."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"]
    pad = 40
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{pad}" y="20" font-size="12">loss trace (per-curve min-max scaled) vs iteration</text>']
    for k, (name, y) in enumerate(curves.items()):
        y = np.asarray(y, dtype=float)
        if y.size < 2:
            continue
        lo, hi = float(y.min()), float(y.max())
        span = hi - lo or 1.0
        xs = pad + np.arange(y.size) * (width - 2 * pad) / (y.size - 1)
        ys = height - pad - (y - lo) / span * (height - 2 * pad)
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(xs, ys))
        col = colors[k % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{col}" stroke-width="1" points="{pts}"/>')
        parts.append(f'<text x="{width - pad - 150}" y="{pad + 14 * k}" font-size="10" fill="{col}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
