"""On-disk run artifacts: per-trial CSVs, a JSON manifest, JSON reports and a text summary."""
from __future__ import annotations

import csv
import json
import platform
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from .estimators import Trace

CSV_SCHEMA_VERSION = 1
MANIFEST = "manifest.json"
FINAL_ESTIMATES = "final_estimates.csv"


def trace_columns(n_nodes: int, transformed: bool) -> list[str]:
    cols = ["iter", *[f"err_sensor_{n}" for n in range(n_nodes)], "consensus_gap"]
    if transformed:
        cols.append("transformed_err")
    return cols + ["alpha", "consensus_weight"]


def versions() -> dict:
    from . import __version__

    return {"distest": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def trace_filename(seed: int) -> str:
    return f"trace_seed{seed}.csv"


def write_trace_csv(trace: Trace, path: Path) -> None:
    nlu = trace.transformed_error is not None
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trace_columns(trace.n_nodes, nlu))
        for r, it in enumerate(trace.iterations):
            row = [int(it), *map(repr, trace.sensor_errors[r].tolist()), repr(float(trace.consensus_gap[r]))]
            if nlu:
                row.append(repr(float(trace.transformed_error[r])))
            row += [repr(float(trace.alpha[r])), repr(float(trace.consensus_weight[r]))]
            w.writerow(row)


def read_trace_csv(path: Path, seed: int, final_estimates: np.ndarray, digest: str = "", algorithm: str = "",
                   diverged_at: int | None = None) -> Trace:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(rows[0]))
    n = sum(1 for h in header if h.startswith("err_sensor_"))
    col = {h: k for k, h in enumerate(header)}
    return Trace(
        seed=seed, digest=digest, algorithm=algorithm,
        iterations=body[:, 0].astype(np.int64),
        sensor_errors=body[:, 1 : 1 + n],
        consensus_gap=body[:, col["consensus_gap"]],
        alpha=body[:, col["alpha"]],
        consensus_weight=body[:, col["consensus_weight"]],
        final_estimates=final_estimates,
        transformed_error=body[:, col["transformed_err"]] if "transformed_err" in col else None,
        diverged_at=diverged_at,
    )


def write_final_estimates(traces: Sequence[Trace], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        M = traces[0].final_estimates.shape[1] if traces else 0
        w.writerow(["seed", "sensor", *[f"x_{m}" for m in range(M)]])
        for t in traces:
            for n, row in enumerate(t.final_estimates):
                w.writerow([t.seed, n, *map(repr, row.tolist())])


def load_runs(run_dir: Path) -> tuple[dict, list[Trace]]:
    """Reload the manifest and every trace written by ``emit_reports``."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / MANIFEST).read_text())
    finals: dict[int, list] = {}
    fe = run_dir / FINAL_ESTIMATES
    if fe.exists():
        with open(fe, newline="") as fh:
            rd = csv.reader(fh)
            next(rd)
            for row in rd:
                finals.setdefault(int(row[0]), []).append([float(v) for v in row[2:]])
    diverged = {int(k): v for k, v in manifest.get("diverged", {}).items()}
    traces = []
    for seed in manifest["seeds"]:
        traces.append(read_trace_csv(run_dir / trace_filename(seed), seed, np.array(finals.get(seed, [])),
                                     manifest.get("digest", ""), manifest.get("algorithm", ""), diverged.get(seed)))
    return manifest, traces


def _summary_lines(metrics: dict) -> list[str]:
    if not metrics:
        return []
    width = max(len(k) for k in metrics)
    out = []
    for k, v in metrics.items():
        s = f"{v:.6g}" if isinstance(v, float) else str(v)
        out.append(f"{k.ljust(width)}  {s}")
    return out


def emit_reports(out_dir: Path, traces: Sequence[Trace], manifest: dict, analysis: dict | None = None,
                 summary: dict | None = None) -> list[Path]:
    """Write all artifacts of a run and return the paths written.

    ``summary`` maps metric names to values for the plain-text table;
    IO failures propagate unchanged.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for t in traces:
        p = out_dir / trace_filename(t.seed)
        write_trace_csv(t, p)
        written.append(p)
    if traces:
        p = out_dir / FINAL_ESTIMATES
        write_final_estimates(traces, p)
        written.append(p)
    man = dict(manifest)
    man.setdefault("csv_schema_version", CSV_SCHEMA_VERSION)
    if traces:
        man.setdefault("columns", trace_columns(traces[0].n_nodes, traces[0].transformed_error is not None))
    man.setdefault("versions", versions())
    man.setdefault("seeds", [t.seed for t in traces])
    man.setdefault("diverged", {str(t.seed): t.diverged_at for t in traces if t.diverged_at is not None})
    p = out_dir / MANIFEST
    p.write_text(json.dumps(man, indent=2, sort_keys=True))
    written.append(p)
    if analysis is not None:
        p = out_dir / "reports.json"
        p.write_text(json.dumps(analysis, indent=2, sort_keys=True))
        written.append(p)
    p = out_dir / "summary.txt"
    lines = _summary_lines(summary or {})
    p.write_text("".join(line + "\n" for line in lines))
    written.append(p)
    return written
