"""Command-line pipeline: gen, trace, train, infer, retention, report.

Stages talk only through files in the output directory::

    dataset.jsonl, manifest.json          gen
    traces/, scores.csv, samples.npz      trace
    predictor.json, history.csv           train
    infer_<policy>/...                    infer
    retention.csv                         retention
    report/...                            report
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .cachemgr import POLICIES, CacheError, selection_split
from .costmodel import break_even_K, series
from .importance import SegmentError, analyze, retention_experiment, scores_csv
from .numkernel import MlpParams
from .policy import make_policy
from .predictor import TraceSamples, TrainConfig, TrainingError, load_checkpoint, save_checkpoint, train
from .synthdata import TaskError, TaskParams, gen_dataset, read_jsonl, write_jsonl
from .toymodel import (
    ModelConfig,
    build_planted_model,
    build_random_model,
    build_scripted_model,
    decode_instance,
    planted_config,
    rebind,
)

log = logging.getLogger("dynts")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # task
    num_keys: int = 8
    num_distractor_pairs: int = 5
    filler_length: int = 60
    digits_per_value: int = 2
    num_fillers: int = 8
    max_pos: int = 512
    n: int = 200
    seed: int = 0
    # model
    model: str = "planted"
    n_layers: int = 12
    d_model: int = 128
    n_heads: int = 4
    eps: float = 0.1
    noise: float = 0.1
    salience: str = "uniform"
    # budget
    budget: int = 40
    local_window: int = 6
    ratio: float = 0.25
    n_sink: int = 4
    policy: str = "dynts"
    # training
    epochs: int = 15
    lr: float = 5e-4
    weight_decay: float = 0.01
    global_batch: int = 256
    micro_batch: int = 64
    val_fraction: float = 0.1
    # outputs
    record_limit: int = 5
    retention_p: str = "10,20,30,40,50,60,70,80,90,100"

    def validate(self) -> None:
        checks = {
            "n": self.n >= 1,
            "model": self.model in ("planted", "scripted", "random"),
            "policy": self.policy in POLICIES,
            "salience": self.salience in ("uniform", "token"),
            "eps": 0.0 <= self.eps <= 1.0,
            "ratio": 0.0 <= self.ratio < 1.0,
            "budget": self.budget >= 1,
            "local_window": self.local_window >= 1,
            "epochs": self.epochs >= 0,
            "lr": self.lr >= 0,
            "n_layers": self.n_layers >= 1,
            "d_model": self.d_model >= 2,
            "record_limit": self.record_limit >= 0,
        }
        for key, ok in checks.items():
            if not ok:
                raise ConfigError(f"invalid value for {key!r}: {getattr(self, key)!r}")
        try:
            self.p_grid
        except ValueError:
            raise ConfigError(f"invalid value for 'retention_p': {self.retention_p!r}") from None

    @property
    def p_grid(self) -> List[float]:
        vals = [float(x) for x in self.retention_p.split(",") if x.strip()]
        if not vals or any(not 0 < p <= 100 for p in vals):
            raise ValueError("bad p grid")
        return vals

    def task(self) -> TaskParams:
        try:
            return TaskParams(
                num_keys=self.num_keys, num_distractor_pairs=self.num_distractor_pairs,
                filler_length=self.filler_length, digits_per_value=self.digits_per_value,
                seed=self.seed, num_fillers=self.num_fillers, max_pos=self.max_pos,
            )
        except TaskError as e:
            raise ConfigError(str(e)) from None

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, lr=self.lr, weight_decay=self.weight_decay,
            global_batch=self.global_batch, micro_batch=self.micro_batch,
            val_fraction=self.val_fraction, seed=self.seed,
        )


def parse_config(text: str) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values: Dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        kind = types[key]
        try:
            values[key] = int(val) if kind == "int" else float(val) if kind == "float" else val
        except ValueError:
            raise ConfigError(f"invalid value for {key!r}: {val!r}") from None
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def load_config(path: Optional[str], seed: Optional[int] = None, policy: Optional[str] = None) -> RunConfig:
    cfg = parse_config(Path(path).read_text()) if path else RunConfig()
    if seed is not None:
        cfg.seed = seed
    if policy is not None:
        cfg.policy = policy
    cfg.validate()
    return cfg


def build_model(cfg: RunConfig, instance=None):
    task = cfg.task()
    if cfg.model == "planted":
        return build_planted_model(task, planted_config(task, n_layers=cfg.n_layers, d_model=cfg.d_model))
    mc = ModelConfig(n_layers=cfg.n_layers, n_heads=cfg.n_heads, d_model=cfg.d_model,
                     vocab_size=task.vocab.size, max_pos=cfg.max_pos)
    if cfg.model == "scripted":
        if instance is None:
            raise ConfigError("the scripted model is bound to an instance")
        return build_scripted_model(mc, instance, eps=cfg.eps, noise=cfg.noise,
                                    salience=cfg.salience, seed=cfg.seed)
    return build_random_model(mc, seed=cfg.seed)


def _model_for(cfg: RunConfig, cache: dict, inst):
    if cfg.model == "scripted":
        if "base" not in cache:
            cache["base"] = build_model(cfg, inst)
        return rebind(cache["base"], inst)
    if "base" not in cache:
        cache["base"] = build_model(cfg)
    return cache["base"]


def _dataset(out: Path) -> Path:
    p = out / "dataset.jsonl"
    if not p.exists():
        raise FileNotFoundError(f"{p} not found; run 'dynts gen' first")
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: RunConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    insts = gen_dataset(cfg.task(), cfg.n, seed=cfg.seed)
    write_jsonl(insts, out / "dataset.jsonl")
    manifest = {"seed": cfg.seed, "count": len(insts), "sequence_length": cfg.task().sequence_length}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True) + "\n")
    log.info("wrote %d instances to %s", len(insts), out / "dataset.jsonl")
    return 0


def cmd_trace(cfg: RunConfig, out: Path) -> int:
    insts = read_jsonl(_dataset(out))
    tdir = out / "traces"
    tdir.mkdir(parents=True, exist_ok=True)
    cache: dict = {}
    hid, lab, tid = [], [], []
    rows = []
    skipped = 0
    for k, inst in enumerate(insts):
        try:
            an = analyze(_model_for(cfg, cache, inst), inst)
        except SegmentError as e:
            skipped += 1
            log.warning("trace %d skipped: %s", k, e)
            continue
        if abs(an.scores.total_mass - an.scores.expected_mass) > 1e-6:
            raise RuntimeError(f"trace {k}: attention mass not conserved")
        if len(an.record) != len(an.sequence):
            raise RuntimeError(f"trace {k}: record length mismatch")
        text = scores_csv(k, an)
        (tdir / f"scores_{k:05d}.csv").write_text(text)
        rows.append(text if not rows else text.split("\n", 1)[1])
        if k < cfg.record_limit:
            (tdir / f"attention_{k:05d}.jsonl").write_text(an.record.to_jsonl())
        h = an.think_hiddens()
        hid.append(h)
        lab.append(an.labels)
        tid.append(np.full(h.shape[0], inst.seed))
    (out / "scores.csv").write_text("".join(rows))
    if hid:
        np.savez(out / "samples.npz", hidden=np.concatenate(hid), labels=np.concatenate(lab),
                 trace_id=np.concatenate(tid))
    summary = {"traces": len(insts) - skipped, "skipped": skipped}
    (out / "trace_summary.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    log.info("traced %d instances (%d skipped)", summary["traces"], skipped)
    return 0


def load_samples(path: Path) -> List[TraceSamples]:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run 'dynts trace' first")
    z = np.load(path)
    out = []
    for t in np.unique(z["trace_id"]):
        m = z["trace_id"] == t
        out.append(TraceSamples(int(t), z["hidden"][m], z["labels"][m]))
    return out


def cmd_train(cfg: RunConfig, out: Path) -> int:
    traces = load_samples(out / "samples.npz")
    tc = cfg.train_config()
    d = traces[0].hidden.shape[1]
    init = MlpParams.init(d, np.random.default_rng([tc.seed, 0x7A1]))
    try:
        params, hist = train(traces, tc, init=init)
    except TrainingError as e:
        log.error("%s", e)
        return 1
    save_checkpoint(params, out / "predictor.json", tc, extra={"d_model": d})
    (out / "history.csv").write_text(hist.to_csv())
    if hist.rows:
        log.info("final epoch: %s", {k: round(v, 4) for k, v in hist.last().items()})
    return 0


def cmd_infer(cfg: RunConfig, out: Path, checkpoint: Optional[str]) -> int:
    insts = read_jsonl(_dataset(out))
    params = None
    if cfg.policy == "dynts":
        ck = Path(checkpoint) if checkpoint else out / "predictor.json"
        if not ck.exists():
            raise FileNotFoundError(f"policy 'dynts' needs a checkpoint; {ck} not found")
        params = load_checkpoint(ck)
    idir = out / f"infer_{cfg.policy}"
    idir.mkdir(parents=True, exist_ok=True)
    cache: dict = {}
    results = ["instance,seed,correct,events,error\n"]
    logs, series_rows = [], []
    correct, peaks, ratios = [], [], []
    for k, inst in enumerate(insts):
        model = _model_for(cfg, cache, inst)
        try:
            pol = make_policy(cfg.policy, cfg.budget, cfg.local_window, cfg.ratio, len(inst.question),
                              params=params, d_model=model.config.d_model, n_sink=cfg.n_sink,
                              seed=cfg.seed * 1000003 + k)
            res = decode_instance(model, inst, pol)
        except CacheError as e:
            results.append(f"{k},{inst.seed},,,{str(e).replace(',', ';')}\n")
            continue
        ok = res.answer() == inst.answer
        correct.append(ok)
        results.append(f"{k},{inst.seed},{int(ok)},{len(res.events)},\n")
        logs.append(pol.export_log())
        s = series(res.pre_lengths, res.cache_lengths, len(inst.question),
                   model.config.n_layers, model.config.d_model, with_predictor=cfg.policy == "dynts")
        peaks.append(s.peak_memory_ratio)
        ratios.append(s.cum_opt[-1] / s.cum_base[-1])
        csv_text = s.to_csv()
        series_rows.append(csv_text if not series_rows else csv_text.split("\n", 1)[1])
    (idir / "results.csv").write_text("".join(results))
    (idir / "evictions.jsonl").write_text("".join(logs))
    (idir / "cost_series.csv").write_text("".join(series_rows))
    summary = {
        "policy": cfg.policy,
        "instances": len(insts),
        "completed": len(correct),
        "accuracy": float(np.mean(correct)) if correct else 0.0,
        "peak_memory_ratio": float(np.max(peaks)) if peaks else None,
        "cum_flops_ratio": float(np.mean(ratios)) if ratios else None,
    }
    (idir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    log.info("%s: accuracy %.3f over %d", cfg.policy, summary["accuracy"], len(correct))
    return 0


def cmd_retention(cfg: RunConfig, out: Path) -> int:
    if cfg.model != "planted":
        raise ConfigError("retention runs on the planted model (model=planted)")
    insts = read_jsonl(_dataset(out))
    table = retention_experiment(build_model(cfg), insts, p_grid=cfg.p_grid, seed=cfg.seed)
    (out / "retention.csv").write_text(table.to_csv())
    log.info("retention: full %.3f, top@30 %s", table.full,
             table.get("top", 30.0) if 30.0 in cfg.p_grid else "n/a")
    return 0


def cmd_report(cfg: RunConfig, out: Path, run_acceptance: bool = True) -> int:
    from . import report

    return report.write_report(cfg, out, run_acceptance=run_acceptance)


COMMANDS = ("gen", "trace", "train", "infer", "retention", "report")


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = argparse.ArgumentParser(prog="dynts", description="Thinking-token KV-cache selection pipeline")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="key=value config file")
    ap.add_argument("--out", default="runs/default", help="output directory")
    ap.add_argument("--seed", type=int, help="overrides the config seed")
    ap.add_argument("--policy", help=f"one of {', '.join(POLICIES)}")
    ap.add_argument("--checkpoint", help="predictor checkpoint for --policy dynts")
    ap.add_argument("--skip-acceptance", action="store_true", help="report: do not rerun acceptance checks")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.policy)
        out = Path(args.out)
        if args.command == "gen":
            return cmd_gen(cfg, out)
        if args.command == "trace":
            return cmd_trace(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "infer":
            return cmd_infer(cfg, out, args.checkpoint)
        if args.command == "retention":
            return cmd_retention(cfg, out)
        return cmd_report(cfg, out, run_acceptance=not args.skip_acceptance)
    except (ConfigError, TaskError, CacheError, FileNotFoundError, OSError) as e:
        print(f"dynts: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
