"""The ten acceptance checks, each returning measured values and a verdict.

Shared by ``tests/test_acceptance.py`` and ``dynts report``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np

from .cachemgr import (
    AccumAttentionCache,
    CacheEntry,
    DualWindowCache,
    FullCache,
    RandomCache,
    SinkRecentCache,
    WindowCache,
    selection_split,
)
from .costmodel import (
    CostParams,
    attn_flops,
    break_even_K,
    eviction_count,
    gain,
    series,
    simulate_stream,
)
from .experiments import BudgetConfig, planted_pipeline, samples_from
from .importance import analyze, precision_at_critical, retention_experiment
from .numkernel import MlpParams, finite_diff_check, mlp_backward, mlp_forward
from .policy import DyntsPolicy
from .predictor import TrainConfig, train
from .synthdata import TaskParams, gen_dataset
from .toymodel import (
    FlopCounter,
    ModelConfig,
    build_planted_model,
    build_random_model,
    build_scripted_model,
    decode,
    decode_instance,
    planted_config,
    rebind,
)

# runtime limits in seconds
LIMITS = {1: 30, 2: 60, 3: 120, 4: 120, 5: 60, 6: 180, 7: 300, 8: 600, 9: 300, 10: 60}

TASK = TaskParams()
E2E_BUDGET = BudgetConfig(budget=40, local_window=6, ratio=0.25)


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    measured: Dict[str, object] = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        vals = ", ".join(f"{k}={_fmt(v)}" for k, v in self.measured.items())
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] criterion {self.number} ({self.name}): {vals}; {self.seconds:.1f}s"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _timed(number: int, name: str, fn: Callable[[], tuple]) -> CheckResult:
    t0 = time.perf_counter()
    ok, measured = fn()
    dt = time.perf_counter() - t0
    ok = bool(ok) and dt < LIMITS[number]
    return CheckResult(number, name, ok, measured, dt)


# 1 ---------------------------------------------------------------------------

def gradient_check(n_configs: int = 100, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        dims = []
        for c in range(n_configs):
            d = int(rng.choice([2, 4, 6, 8, 12, 16, 24, 32])) if c % 10 else int(rng.choice([64, 96, 128]))
            p = MlpParams.init(d, rng)
            for _, a in p.items():
                a += 0.1 * rng.normal(size=a.shape)  # non-zero biases too
            x = rng.normal(size=(3, d))
            y = rng.normal(size=3)

            def f(q):
                s, _ = mlp_forward(q, x)
                return 0.5 * float(np.sum((s - y) ** 2))

            s, acts = mlp_forward(p, x)
            g, _ = mlp_backward(p, acts, s - y)
            cap = None if d <= 32 else 24
            worst = max(worst, finite_diff_check(f, p, g, eps=1e-4, max_per_array=cap, rng=rng))
            dims.append(d)
        return worst < 1e-4, {"max_rel_err": worst, "configs": len(dims), "max_d": max(dims)}

    return _timed(1, "gradient oracle", run)


# 2 ---------------------------------------------------------------------------

def conservation_check(n_traces: int = 200) -> CheckResult:
    def run():
        insts = gen_dataset(TASK, n_traces, seed=500)
        cfg = ModelConfig(n_layers=3, n_heads=2, d_model=32, vocab_size=TASK.vocab.size)
        base = build_scripted_model(cfg, insts[0], eps=0.1)
        worst = 0.0
        for inst in insts:
            sc = analyze(rebind(base, inst), inst).scores
            worst = max(worst, abs(sc.total_mass - sc.expected_mass))
        return worst <= 1e-6, {"max_abs_dev": worst, "traces": n_traces}

    return _timed(2, "attention mass conservation", run)


# 3 ---------------------------------------------------------------------------

def equivalence_check(n_decodes: int = 100) -> CheckResult:
    def run():
        model = build_planted_model(TASK, planted_config(TASK))
        params = MlpParams.init(model.config.d_model, np.random.default_rng(3))
        insts = gen_dataset(TASK, n_decodes, seed=2000)
        same = 0
        for inst in insts:
            B = TASK.sequence_length + 16
            a = decode_instance(model, inst, FullCache())
            b = decode_instance(model, inst, DyntsPolicy(params, B, 8, 0.3, d_model=model.config.d_model))
            identical = (
                a.tokens == b.tokens
                and not b.events
                and all(np.array_equal(x, y) for x, y in zip(a.hiddens, b.hiddens))
            )
            same += identical
        return same == n_decodes, {"identical": same, "decodes": n_decodes}

    return _timed(3, "full-cache equivalence", run)


# 4 ---------------------------------------------------------------------------

def _fuzz_policy(kind: str, rng: np.random.Generator):
    M = int(rng.integers(0, 8))
    W = int(rng.integers(1, 10))
    B = M + W + int(rng.integers(2, 40))
    r = float(rng.uniform(0.0, 0.9))
    if kind == "dynts":
        pol = DualWindowCache(B, W, r)
    elif kind == "window":
        pol = WindowCache(W, budget=B)
    elif kind == "sink_recent":
        pol = SinkRecentCache(B, W, n_sink=int(rng.integers(0, M + 2)))
    elif kind == "accum_attention":
        pol = AccumAttentionCache(B, W, r)
    elif kind == "random":
        _, _, k = selection_split(B, M, W, r)
        pol = RandomCache(B, max(k, 1), seed=int(rng.integers(1 << 30)))
    else:
        pol = FullCache()
    return pol, M, B


class _FakeOut:
    def __init__(self, pos, mass):
        self._p, self._m = pos, mass

    def received_mass(self):
        return self._p, self._m


def fuzz_streams(n_streams: int = 1200, seed: int = 0, collect_counts: bool = False):
    rng = np.random.default_rng(seed)
    kinds = ["dynts", "window", "sink_recent", "accum_attention", "random", "full"]
    kv = np.zeros((1, 1))
    violations = 0
    count_mismatch = 0
    dual_streams = 0
    steps_total = 0
    for s in range(n_streams):
        kind = kinds[s % len(kinds)]
        pol, M, B = _fuzz_policy(kind, rng)
        pol.init([CacheEntry(p, 1, kv, kv) for p in range(M)])
        n = int(rng.integers(1, 3 * B + 2))
        close_at = int(rng.integers(1, n + 2))
        evicted_seen = set()
        for i in range(1, n + 1):
            pos = M + i - 1
            tok = 3 if i == close_at else 0
            if kind == "accum_attention":
                view = pol.positions + [pos]
                pol.observe(_FakeOut(np.asarray(view), rng.random(len(view))))
            pol.on_step_scored(CacheEntry(pos, tok, kv, kv), float(rng.integers(0, 4)))
            steps_total += 1
            cur = pol.positions
            cur_set = set(cur)
            bad = len(cur) > pol.budget
            bad |= any(p not in cur_set for p in range(M))
            w = pol.local_window
            if w:
                want = list(range(max(M, pos - min(w, i) + 1), pos + 1))
                bad |= any(p not in cur_set for p in want)
            bad |= bool(cur_set & evicted_seen)
            evicted_seen |= pol.evicted_positions
            violations += bad
            if kind == "dynts" and len(pol.events) != eviction_count(M, i, B, pol.k_evict):
                count_mismatch += 1
        dual_streams += kind == "dynts"
    return violations, count_mismatch, dual_streams, steps_total


def budget_safety_check(n_streams: int = 1200) -> CheckResult:
    def run():
        v, _, _, steps = fuzz_streams(n_streams, seed=11)
        return v == 0, {"violations": v, "streams": n_streams, "steps": steps}

    return _timed(4, "budget safety fuzz", run)


# 5 ---------------------------------------------------------------------------

def cost_model_check() -> CheckResult:
    def run():
        rng = np.random.default_rng(5)
        # instrumented attention kernels vs 4*L*d*S, per step
        mac_mismatch = 0
        mac_steps = 0
        for trial in range(12):
            L = int(rng.integers(1, 4))
            H = int(rng.choice([1, 2, 4]))
            d = H * int(rng.choice([2, 4, 8]))
            cfg = ModelConfig(n_layers=L, n_heads=H, d_model=d, vocab_size=16, max_pos=256)
            model = build_random_model(cfg, seed=trial)
            params = MlpParams.init(d, rng)
            M = int(rng.integers(1, 5))
            W = int(rng.integers(1, 6))
            B = M + W + int(rng.integers(3, 20))
            pol = DyntsPolicy(params, B, W, float(rng.uniform(0, 0.8)), d_model=d)
            counter = FlopCounter()
            prompt = rng.integers(5, 16, size=M).tolist()
            res = decode(model, prompt, pol, max_steps=int(rng.integers(20, 60)),
                         forced=rng.integers(5, 16, size=80).tolist(), counter=counter)
            for measured, S in zip(counter.per_step, res.pre_lengths):
                mac_steps += 1
                mac_mismatch += measured != attn_flops(L, d, S)
        # eviction_count vs event log on fuzzed dual-window streams
        _, count_mismatch, dual, _ = fuzz_streams(600, seed=23)
        # sign flip at the break-even K over the grid
        flips_bad = 0
        grid = 0
        for d in range(32, 513, 2):
            for L in range(1, 9):
                for n in range(1, 5):
                    be = break_even_K(d, L, n)
                    p_hi = CostParams(L, d, 0, 1, be.K)
                    p_lo = CostParams(L, d, 0, 1, max(be.K - 1, 1))
                    ok = gain(0, p_hi, n=n) > 0 and (be.K == 1 or gain(0, p_lo, n=n) <= 0)
                    flips_bad += not ok
                    grid += 1
        approx = break_even_K(4096, 32, 1).approx
        ok = mac_mismatch == 0 and count_mismatch == 0 and flips_bad == 0 and approx == 192
        return ok, {
            "mac_mismatch": mac_mismatch, "mac_steps": mac_steps,
            "count_mismatch": count_mismatch, "dual_streams": dual,
            "sign_failures": flips_bad, "grid_points": grid, "approx_d4096_L32": approx,
        }

    return _timed(5, "cost model exactness", run)


# 6 ---------------------------------------------------------------------------

def oracle_ranking_check(n: int = 200) -> CheckResult:
    def run():
        insts = gen_dataset(TASK, n, seed=3000)
        cfg = ModelConfig(n_layers=2, n_heads=2, d_model=32, vocab_size=TASK.vocab.size)
        scripted = {}
        for eps in (0.0, 0.05, 0.1):
            base = build_scripted_model(cfg, insts[0], eps=eps)
            precs = [precision_at_critical(analyze(rebind(base, i), i).scores.think(), i.critical_mask)
                     for i in insts]
            scripted[eps] = min(precs)
        planted = build_planted_model(TASK, planted_config(TASK))
        pp = [precision_at_critical(analyze(planted, i).scores.think(), i.critical_mask) for i in insts]
        ok = all(v == 1.0 for v in scripted.values()) and float(np.mean(pp)) >= 0.95
        return ok, {"scripted_min_precision": min(scripted.values()),
                    "planted_mean_precision": float(np.mean(pp)), "instances": n}

    return _timed(6, "oracle ranking", run)


# 7 ---------------------------------------------------------------------------

def retention_check(n: int = 200) -> CheckResult:
    def run():
        insts = gen_dataset(TASK, n, seed=4000)
        model = build_planted_model(TASK, planted_config(TASK))
        tab = retention_experiment(model, insts, p_grid=(10, 20, 30), seed=7)
        m = {"full": tab.full}
        ok = tab.full - tab.get("top", 30) <= 0.05
        for p in (10, 20, 30):
            t, r, b = tab.get("top", p), tab.get("random", p), tab.get("bottom", p)
            m[f"top@{p}"], m[f"random@{p}"], m[f"bottom@{p}"] = t, r, b
            ok &= t >= r >= b and t - b >= 0.10
        m["instances"] = n
        return ok, m

    return _timed(7, "retention mirror", run)


# 8 ---------------------------------------------------------------------------

PREDICTOR_CORPUS = dict(eps=0.5, noise=0.1, salience="token")


def predictor_check(n_traces: int = 500) -> CheckResult:
    def run():
        insts = gen_dataset(TASK, n_traces, seed=0)
        cfg = ModelConfig(n_layers=2, n_heads=2, d_model=64, vocab_size=TASK.vocab.size)
        base = build_scripted_model(cfg, insts[0], **PREDICTOR_CORPUS)
        analyses = [analyze(rebind(base, i), i) for i in insts]
        before = base.checksum()
        _, hist = train(samples_from(analyses), TrainConfig())
        val = hist.column("val_mse")
        mono = all(v <= 1.10 * min(val[:e]) for e, v in enumerate(val) if e > 0)
        last = hist.last()
        ok = (last["kendall"] >= 0.6 and last["overlap_20_in_30"] >= 0.8 and mono
              and base.checksum() == before)
        return ok, {"kendall": last["kendall"], "overlap_20_in_30": last["overlap_20_in_30"],
                    "val_mse_first": val[0], "val_mse_last": val[-1], "val_mse_banded": mono,
                    "traces": n_traces}

    return _timed(8, "predictor convergence", run)


# 9 ---------------------------------------------------------------------------

def end_to_end_check(n_eval: int = 200) -> CheckResult:
    def run():
        _, _, _, runs = planted_pipeline(TASK, n_train=120, n_eval=n_eval, budget=E2E_BUDGET)
        acc = {k: v.accuracy for k, v in runs.items()}
        min_events = min(runs["dynts"].events)
        ok = (acc["dynts"] > acc["accum_attention"] >= acc["sink_recent"] >= acc["window"] >= acc["random"]
              and acc["full"] - acc["dynts"] <= 0.02 and min_events >= 3)
        m = {k: acc[k] for k in ("full", "dynts", "accum_attention", "sink_recent", "window", "random")}
        m["min_dynts_events"] = min_events
        m["instances"] = n_eval
        return ok, m

    return _timed(9, "end-to-end ordering", run)


# 10 --------------------------------------------------------------------------

SAWTOOTH = dict(M=2, B=100, local_window=20, ratio=0.3)


def sawtooth_check() -> CheckResult:
    def run():
        cfg = planted_config(TASK)
        L, d = cfg.n_layers, cfg.d_model
        M, B = SAWTOOTH["M"], SAWTOOTH["B"]
        n_steps = 4 * B - M
        pol, pre, post = simulate_stream(M, B, SAWTOOTH["local_window"], SAWTOOTH["ratio"], n_steps, seed=1)
        K = pol.k_evict
        s = series(pre, post, M, L, d)
        first = s.first_eviction_step
        saw = True
        for k in range(first, len(post)):
            if post[k] == post[k - 1] + 1:
                saw &= B - K <= post[k] < B
            else:
                saw &= post[k - 1] == B - 1 and post[k] == B - K and pre[k] == B
        saw &= min(post[first - 1:]) == B - K and max(pre) == B
        ratio = s.flops_ratio(first + 1)
        be = break_even_K(d, L, 1)
        ok = saw and s.peak_memory_ratio <= 0.30 and K >= be.K and bool(np.all(ratio < 1.0))
        return ok, {
            "K_evict": K, "break_even_K": be.K, "peak_memory_ratio": s.peak_memory_ratio,
            "max_cum_flops_ratio_after_first_eviction": float(ratio.max()),
            "final_cum_flops_ratio": float(s.cum_opt[-1] / s.cum_base[-1]),
            "from_start_crossover_step": s.crossover_step(), "first_eviction_step": first,
            "sawtooth": saw,
        }

    return _timed(10, "sawtooth and memory", run)


CHECKS = {
    1: gradient_check,
    2: conservation_check,
    3: equivalence_check,
    4: budget_safety_check,
    5: cost_model_check,
    6: oracle_ranking_check,
    7: retention_check,
    8: predictor_check,
    9: end_to_end_check,
    10: sawtooth_check,
}


def run_all(numbers=None) -> List[CheckResult]:
    return [CHECKS[n]() for n in (numbers or sorted(CHECKS))]
