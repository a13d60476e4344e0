"""Analytic attention/predictor FLOPs, eviction counts and per-step series.

Attention cost per step is 4*L*d*S (QK^T plus softmax*V, 2 FLOPs per
multiply-add); the predictor adds 2*(d*m1 + m1*m2 + m2*m3) = 6d^2 + d for the
default 2d, d/2, 1 widths. Savings are counted from the step after each
eviction, which is when the shorter cache is first attended.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence

import numpy as np


def predictor_flops(d: int, m1: Optional[int] = None, m2: Optional[int] = None, m3: int = 1) -> int:
    if m1 is None and m2 is None and (d < 2 or d % 2):
        raise ValueError(f"d must be even and >= 2, got {d}")
    m1 = 2 * d if m1 is None else m1
    m2 = d // 2 if m2 is None else m2
    return 2 * (d * m1 + m1 * m2 + m2 * m3)


def attn_flops(L: int, d: int, S: int) -> int:
    if L < 0 or d < 0 or S < 0:
        raise ValueError("attn_flops takes non-negative inputs")
    return 4 * L * d * S


def eviction_count(M: int, i: int, B: int, K: int) -> int:
    if K < 1:
        raise ValueError("K must be >= 1")
    return max(0, (M + i - B) // K + 1)


@dataclass(frozen=True)
class CostParams:
    L: int
    d: int
    M: int
    B: int
    K: int

    def __post_init__(self) -> None:
        if min(self.L, self.d, self.B, self.K) < 1 or self.M < 0:
            raise ValueError("L, d, B, K must be positive and M >= 0")
        if self.B <= self.M:
            raise ValueError(f"budget B={self.B} must exceed prefill M={self.M}")


def gain(i: int, p: CostParams, n: Optional[int] = None) -> int:
    """Attention saved by n_i evictions of K entries minus one predictor call."""
    n_i = eviction_count(p.M, i, p.B, p.K) if n is None else n
    return n_i * attn_flops(p.L, p.d, p.K) - predictor_flops(p.d)


@dataclass(frozen=True)
class BreakEven:
    K: int  # smallest integer K with positive gain
    bound: Fraction  # exact (6d^2 + d) / (4 L d n)
    approx: float  # 1.5 d / (n L)


def break_even_K(d: int, L: int, n: int = 1) -> BreakEven:
    if min(d, L, n) < 1:
        raise ValueError("d, L, n must be positive")
    bound = Fraction(predictor_flops(d), 4 * L * d * n)
    return BreakEven(math.floor(bound) + 1, bound, 1.5 * d / (n * L))


@dataclass
class CostSeries:
    L: int
    d: int
    M: int
    steps: List[int] = field(default_factory=list)
    base_len: List[int] = field(default_factory=list)  # M + i, attended at step i
    opt_len: List[int] = field(default_factory=list)  # attended at step i (pre-eviction length)
    post_len: List[int] = field(default_factory=list)
    cum_base: List[int] = field(default_factory=list)
    cum_opt: List[int] = field(default_factory=list)
    step_gain: List[int] = field(default_factory=list)
    evictions: List[int] = field(default_factory=list)  # events up to and including step i

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def peak_memory_ratio(self) -> float:
        return max(self.opt_len) / self.base_len[-1]

    @property
    def first_eviction_step(self) -> Optional[int]:
        for s, n in zip(self.steps, self.evictions):
            if n:
                return s
        return None

    def flops_ratio(self, start: int = 1) -> np.ndarray:
        """Cumulative opt/base FLOPs ratio, accumulating from step ``start``."""
        i0 = self.steps.index(start)
        b = np.cumsum(np.diff([0] + self.cum_base)[i0:])
        o = np.cumsum(np.diff([0] + self.cum_opt)[i0:])
        return o / b

    def crossover_step(self) -> Optional[int]:
        """First step from which the from-start cumulative ratio stays below 1."""
        r = self.flops_ratio(self.steps[0])
        above = np.nonzero(r >= 1.0)[0]
        if above.size == 0:
            return self.steps[0]
        if above[-1] + 1 >= len(self.steps):
            return None
        return self.steps[above[-1] + 1]

    def throughput_proxy(self) -> List[float]:
        per = np.diff([0] + self.cum_opt)
        return [1.0 / x if x else math.inf for x in per.tolist()]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "eff_len_base", "eff_len_opt", "cum_flops_base", "cum_flops_opt", "mem_ratio", "gain"])
        for k in range(len(self.steps)):
            w.writerow([
                self.steps[k], self.base_len[k], self.opt_len[k], self.cum_base[k], self.cum_opt[k],
                f"{self.opt_len[k] / self.base_len[k]:.6f}", self.step_gain[k],
            ])
        return buf.getvalue()


def series(pre_lengths: Sequence[int], post_lengths: Sequence[int], M: int, L: int, d: int,
           with_predictor: bool = True) -> CostSeries:
    """Per-step cost series from a decode trace.

    ``pre_lengths[i-1]`` is the length attended at generated step i (cache plus
    the new token); ``post_lengths`` is the length after that step's eviction.
    """
    if len(pre_lengths) != len(post_lengths) or not pre_lengths:
        raise ValueError("series needs matching, non-empty pre/post length lists")
    c_mlp = predictor_flops(d) if with_predictor else 0
    s = CostSeries(L, d, M)
    cb = co = 0
    n = 0
    for i, (pre, post) in enumerate(zip(pre_lengths, post_lengths), start=1):
        if pre < post or pre > M + i:
            raise ValueError(f"inconsistent lengths at step {i}: pre={pre}, post={post}")
        if post < pre:
            n += 1
        base = M + i
        ab, ao = attn_flops(L, d, base), attn_flops(L, d, pre) + c_mlp
        cb += ab
        co += ao
        s.steps.append(i)
        s.base_len.append(base)
        s.opt_len.append(pre)
        s.post_len.append(post)
        s.cum_base.append(cb)
        s.cum_opt.append(co)
        s.step_gain.append(ab - ao)
        s.evictions.append(n)
    return s


def simulate_stream(M: int, B: int, local_window: int, ratio: float, n_steps: int, seed: int = 0,
                    think_close_at: Optional[int] = None):
    """Run the dual-window cache on a synthetic stream with random scores.

    Returns the policy after ``n_steps`` appends plus per-step pre/post lengths.
    """
    from .cachemgr import CacheEntry, DualWindowCache

    rng = np.random.default_rng(seed)
    kv = np.zeros((1, 1))
    pol = DualWindowCache(budget=B, local_window=local_window, ratio=ratio, think_close=-1 if think_close_at is None else 3)
    pol.init([CacheEntry(p, 1, kv, kv) for p in range(M)])
    pre, post = [], []
    for i in range(1, n_steps + 1):
        tok = 3 if think_close_at is not None and i == think_close_at else 0
        e = CacheEntry(M + i - 1, tok, kv, kv)
        pol.on_step_scored(e, float(rng.random()))
        pre.append(pol.last_pre_len)
        post.append(pol.total)
    return pol, pre, post


def analytic_lengths(M: int, B: int, K: int, n_steps: int):
    """Pre/post effective lengths implied by eviction_count alone."""
    pre, post = [], []
    for i in range(1, n_steps + 1):
        pre.append(M + i - K * eviction_count(M, i - 1, B, K))
        post.append(M + i - K * eviction_count(M, i, B, K))
    return pre, post
