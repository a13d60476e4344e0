"""Consolidated plot-ready tables plus a markdown summary of a run directory."""

from __future__ import annotations

import csv
import io
import json
import logging
from pathlib import Path
from typing import List, Optional

from .costmodel import series, simulate_stream

log = logging.getLogger("dynts")

REQUIRED = ("retention.csv", "history.csv")


class ReportError(FileNotFoundError):
    pass


def _infer_dirs(out: Path) -> List[Path]:
    return sorted(p for p in out.glob("infer_*") if (p / "summary.json").exists())


def missing_inputs(out: Path) -> List[str]:
    miss = [name for name in REQUIRED if not (out / name).exists()]
    if not _infer_dirs(out):
        miss.append("infer_<policy>/summary.json")
    return miss


def _policy_table(dirs: List[Path]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["policy", "instances", "completed", "accuracy", "peak_memory_ratio", "cum_flops_ratio"])
    for d in dirs:
        s = json.loads((d / "summary.json").read_text())
        w.writerow([s["policy"], s["instances"], s["completed"], f"{s['accuracy']:.6f}",
                    s["peak_memory_ratio"], s["cum_flops_ratio"]])
    return buf.getvalue()


def _sawtooth_table(cfg) -> str:
    # reference stream at four times the budget, on the configured model size
    M = 2
    pol, pre, post = simulate_stream(M, cfg.budget, cfg.local_window, cfg.ratio, 4 * cfg.budget - M, seed=cfg.seed)
    return series(pre, post, M, cfg.n_layers, cfg.d_model).to_csv()


def _md_table(text: str, limit: int = 20) -> List[str]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return []
    lines = ["| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0])]
    lines += ["| " + " | ".join(r) + " |" for r in rows[1:limit + 1]]
    return lines


def write_report(cfg, out: Path, run_acceptance: bool = True, numbers: Optional[List[int]] = None) -> int:
    out = Path(out)
    miss = missing_inputs(out)
    if miss:
        raise ReportError(f"{out}: missing inputs: {', '.join(miss)}")
    rdir = out / "report"
    rdir.mkdir(parents=True, exist_ok=True)
    dirs = _infer_dirs(out)

    retention = (out / "retention.csv").read_text()
    history = (out / "history.csv").read_text()
    policies = _policy_table(dirs)
    sawtooth = _sawtooth_table(cfg)
    (rdir / "retention_curves.csv").write_text(retention)
    (rdir / "training_curves.csv").write_text(history)
    (rdir / "policy_comparison.csv").write_text(policies)
    (rdir / "sawtooth.csv").write_text(sawtooth)
    for d in dirs:
        if (d / "cost_series.csv").exists():
            (rdir / f"cost_series_{d.name[len('infer_'):]}.csv").write_text((d / "cost_series.csv").read_text())

    md = ["# dynts run report", "", f"Run directory: `{out.name}`, seed {cfg.seed}, model {cfg.model}.", ""]
    md += ["## Policy comparison", ""] + _md_table(policies) + [""]
    md += ["## Retention", ""] + _md_table(retention, limit=40) + [""]
    md += ["## Predictor training", ""] + _md_table(history, limit=40) + [""]
    md += ["## Acceptance", ""]
    status = 0
    if run_acceptance:
        from .acceptance import run_all

        results = run_all(numbers)
        md += ["| # | check | result | measured |", "|---|---|---|---|"]
        timing = {}
        for r in results:
            vals = "; ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.measured.items())
            md.append(f"| {r.number} | {r.name} | {'pass' if r.passed else 'FAIL'} | {vals} |")
            timing[r.number] = round(r.seconds, 2)
            if not r.passed:
                status = 1
        # wall-clock lives outside report.md so regeneration stays byte-identical
        (rdir / "acceptance_runtime.json").write_text(json.dumps(timing, indent=1) + "\n")
    else:
        md.append("Acceptance checks skipped (--skip-acceptance).")
    (rdir / "report.md").write_text("\n".join(md) + "\n")
    log.info("report written to %s", rdir)
    return status
