"""Budgeted KV-cache policies.

``DualWindowCache`` is the question/selection/local window state machine with
batched top-k retention. The baselines (full, window, sink+recent, accumulated
attention, random) share its interface so the decode loop treats them alike.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .synthdata import Vocab

INF = math.inf

QUESTION, THINK, ANSWER = "question", "think", "answer"


class CacheError(ValueError):
    pass


class CacheInvariantError(RuntimeError):
    pass


@dataclass
class CacheEntry:
    position: int
    token: int
    keys: np.ndarray  # (n_layers, d)
    values: np.ndarray  # (n_layers, d)
    score: float = 0.0
    phase: str = THINK


@dataclass
class EvictionEvent:
    step: int
    pre_len: int
    post_len: int
    evicted: List[int]
    retained: List[int]
    policy: str

    @property
    def k_evict(self) -> int:
        return len(self.evicted)

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "pre_len": self.pre_len,
                "post_len": self.post_len,
                "evicted": self.evicted,
                "retained": self.retained,
                "policy": self.policy,
            },
            separators=(",", ":"),
        )


@dataclass
class CacheView:
    positions: np.ndarray  # (S,)
    tokens: np.ndarray  # (S,)
    keys: np.ndarray  # (S, n_layers, d)
    values: np.ndarray  # (S, n_layers, d)

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    @classmethod
    def from_entries(cls, entries: Sequence[CacheEntry], n_layers: int = 0, d: int = 0) -> "CacheView":
        if not entries:
            return cls(
                np.zeros(0, dtype=np.int64),
                np.zeros(0, dtype=np.int64),
                np.zeros((0, n_layers, d)),
                np.zeros((0, n_layers, d)),
            )
        return cls(
            np.fromiter((e.position for e in entries), dtype=np.int64, count=len(entries)),
            np.fromiter((e.token for e in entries), dtype=np.int64, count=len(entries)),
            np.stack([e.keys for e in entries]),
            np.stack([e.values for e in entries]),
        )


def selection_split(budget: int, prefill: int, local: int, ratio: float):
    """(W_s, k, K_evict) for a dual-window budget; K_evict = W_s - floor(r * W_s)."""
    w_s = budget - prefill - local
    k = int(math.floor(ratio * w_s))
    return w_s, k, w_s - k


def _order_for_eviction(entries: Iterable[CacheEntry]) -> List[CacheEntry]:
    """Highest score first; ties toward the more recent position."""
    return sorted(entries, key=lambda e: (e.score, e.position), reverse=True)


class CachePolicy:
    """Common state and bookkeeping. Subclasses implement ``maybe_evict``."""

    name = "base"

    def __init__(self, budget: float = INF, local_window: int = 0,
                 think_open: int = Vocab.THINK_OPEN, think_close: int = Vocab.THINK_CLOSE):
        if local_window < 0:
            raise CacheError("local window must be >= 0")
        self.budget = budget
        self.local_window = local_window
        self.think_close = think_close
        self.think_open = think_open
        self._entries: Dict[int, CacheEntry] = {}
        self.prefill_len = 0
        self.steps = 0
        self.events: List[EvictionEvent] = []
        self.evicted_positions: set = set()
        self._in_answer = False
        self._last_pos = -1
        self.last_pre_len = 0
        self.n_layers = 0
        self.d = 0
        self._recent: deque = deque(maxlen=max(local_window, 1))
        self._recent_cap = local_window
        self._buf_pos: List[int] = []
        self._buf_tok: List[int] = []
        self._buf_k: Optional[np.ndarray] = None
        self._buf_v: Optional[np.ndarray] = None

    # -- lifecycle -------------------------------------------------------
    def init(self, prefill: Sequence[CacheEntry]) -> "CachePolicy":
        if len(prefill) > self.budget:
            raise CacheError(f"prefill of {len(prefill)} tokens exceeds budget B={self.budget}")
        self._check_config(len(prefill))
        self._entries.clear()
        self._recent.clear()
        self._buf_pos, self._buf_tok = [], []
        self._buf_k = self._buf_v = None
        for e in prefill:
            if e.position in self._entries:
                raise CacheError(f"duplicate prefill position {e.position}")
            e.score = INF
            e.phase = QUESTION
            self._entries[e.position] = e
            self._last_pos = max(self._last_pos, e.position)
            self._push(e)
        self.prefill_len = len(prefill)
        return self

    def _check_config(self, m: int) -> None:
        pass

    def phase_of(self, token: int) -> str:
        if token == self.think_close:
            self._in_answer = True
        return ANSWER if self._in_answer else THINK

    def score(self, entry: CacheEntry, step_output=None) -> float:
        return 0.0

    def observe(self, step_output) -> None:
        pass

    def append(self, entry: CacheEntry, score: float) -> None:
        if entry.position in self._entries or entry.position in self.evicted_positions:
            raise CacheError(f"duplicate position {entry.position}")
        if entry.position <= self._last_pos:
            raise CacheError(
                f"positions must strictly increase: {entry.position} after {self._last_pos}"
            )
        entry.phase = self.phase_of(entry.token)
        entry.score = INF if entry.phase == ANSWER else float(score)
        self._entries[entry.position] = entry
        self._last_pos = entry.position
        self._push(entry)
        if self._recent_cap:
            self._recent.append(entry.position)
        self.steps += 1

    def _push(self, e: CacheEntry) -> None:
        # contiguous key/value buffers so view() is a slice, not a restack
        n = len(self._buf_pos)
        if self._buf_k is None:
            self.n_layers, self.d = e.keys.shape
            cap = 64
            self._buf_k = np.empty((cap, self.n_layers, self.d))
            self._buf_v = np.empty((cap, self.n_layers, self.d))
        elif n == self._buf_k.shape[0]:
            self._buf_k = np.concatenate([self._buf_k, np.empty_like(self._buf_k)])
            self._buf_v = np.concatenate([self._buf_v, np.empty_like(self._buf_v)])
        self._buf_k[n] = e.keys
        self._buf_v[n] = e.values
        self._buf_pos.append(e.position)
        self._buf_tok.append(e.token)

    def maybe_evict(self) -> Optional[EvictionEvent]:
        return None

    def on_step(self, entry: CacheEntry, step_output=None) -> Optional[EvictionEvent]:
        """Score, append, evict, then verify the safety invariants."""
        self.observe(step_output)
        return self.on_step_scored(entry, self.score(entry, step_output))

    def on_step_scored(self, entry: CacheEntry, score: float) -> Optional[EvictionEvent]:
        self.append(entry, score)
        pre = self.total
        event = self.maybe_evict()
        self.last_pre_len = pre
        self.check_invariants()
        return event

    # -- views -------------------------------------------------------------
    @property
    def total(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> List[CacheEntry]:
        return list(self._entries.values())

    @property
    def positions(self) -> List[int]:
        return list(self._entries.keys())

    def generated(self) -> List[CacheEntry]:
        return [e for e in self._entries.values() if e.phase != QUESTION]

    def view(self) -> CacheView:
        n = len(self._buf_pos)
        if self._buf_k is None:
            return CacheView.from_entries([], self.n_layers, self.d)
        return CacheView(
            np.asarray(self._buf_pos, dtype=np.int64),
            np.asarray(self._buf_tok, dtype=np.int64),
            self._buf_k[:n],
            self._buf_v[:n],
        )

    # -- eviction helpers --------------------------------------------------
    def _evict(self, victims: Sequence[int], pre_len: int) -> EvictionEvent:
        for p in victims:
            e = self._entries.pop(p)
            if e.phase == QUESTION:
                raise CacheInvariantError(f"{self.name}: attempted to evict question entry {p}")
            self.evicted_positions.add(p)
        gone = set(victims)
        keep = [i for i, p in enumerate(self._buf_pos) if p not in gone]
        idx = np.asarray(keep, dtype=np.int64)
        n = len(keep)
        # fresh arrays so earlier views stay valid
        k = np.empty_like(self._buf_k)
        v = np.empty_like(self._buf_v)
        k[:n] = self._buf_k[idx]
        v[:n] = self._buf_v[idx]
        self._buf_k, self._buf_v = k, v
        self._buf_pos = [self._buf_pos[i] for i in keep]
        self._buf_tok = [self._buf_tok[i] for i in keep]
        event = EvictionEvent(
            step=self.steps,
            pre_len=pre_len,
            post_len=self.total,
            evicted=sorted(victims),
            retained=[],
            policy=self.name,
        )
        self.events.append(event)
        return event

    def local_positions(self) -> List[int]:
        gen = [e.position for e in self._entries.values() if e.phase != QUESTION]
        return gen[-self.local_window:] if self.local_window else []

    def check_invariants(self) -> None:
        if self.total > self.budget:
            raise CacheInvariantError(
                f"{self.name}: {self.total} entries exceed budget B={self.budget} at step {self.steps}"
            )
        q = sum(1 for e in self._entries.values() if e.phase == QUESTION)
        if q != self.prefill_len:
            raise CacheInvariantError(f"{self.name}: question entries lost at step {self.steps}")
        for p in self._recent:
            if p not in self._entries:
                raise CacheInvariantError(
                    f"{self.name}: recent position {p} missing from local window at step {self.steps}"
                )

    def export_log(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events)


class DualWindowCache(CachePolicy):
    """Question window (protected), selection window (scored), local window (recency ring).

    When the total reaches B, the selection window keeps its top-k entries by
    score (ties toward later positions) and the rest are evicted permanently.
    """

    name = "dynts"

    def __init__(self, budget: int, local_window: int, ratio: float, **kw):
        super().__init__(budget=budget, local_window=local_window, **kw)
        if not 0.0 <= ratio < 1.0:
            raise CacheError(f"retention ratio r must be in [0, 1), got {ratio}")
        self.ratio = ratio
        self.selection: List[CacheEntry] = []
        self.local: List[CacheEntry] = []

    def _check_config(self, m: int) -> None:
        if self.local_window < 1:
            raise CacheError("dual-window cache needs W_l >= 1")
        w_s, k, k_evict = selection_split(self.budget, m, self.local_window, self.ratio)
        if w_s < 1:
            raise CacheError(
                f"budget B={self.budget} leaves no selection window for M={m}, W_l={self.local_window}"
            )
        if k_evict < 1:
            raise CacheError("retention ratio leaves nothing to evict")
        self.w_s, self.k, self.k_evict = w_s, k, k_evict

    def init(self, prefill: Sequence[CacheEntry]) -> "DualWindowCache":
        super().init(prefill)
        self.selection = []
        self.local = []
        return self

    def append(self, entry: CacheEntry, score: float) -> None:
        super().append(entry, score)
        self.local.append(entry)
        if len(self.local) > self.local_window:
            self.selection.append(self.local.pop(0))

    def maybe_evict(self) -> Optional[EvictionEvent]:
        if self.total < self.budget:
            return None
        if len(self.selection) != self.w_s:
            raise CacheInvariantError(
                f"selection window holds {len(self.selection)} entries at trigger, expected {self.w_s}"
            )
        pre = self.total
        ranked = _order_for_eviction(self.selection)
        keep = ranked[: self.k]
        victims = [e.position for e in ranked[self.k:]]
        keep_pos = {e.position for e in keep}
        self.selection = [e for e in self.selection if e.position in keep_pos]
        event = self._evict(victims, pre)
        event.retained = sorted(keep_pos)
        if self.total != self.budget - self.k_evict:
            raise CacheInvariantError("post-eviction length mismatch")
        return event

    def check_invariants(self) -> None:
        super().check_invariants()
        if self.total != self.prefill_len + len(self.selection) + len(self.local):
            raise CacheInvariantError("window partition does not cover the cache")
        pos = [e.position for e in self.selection]
        if pos != sorted(pos):
            raise CacheInvariantError("selection window out of position order")


class FullCache(CachePolicy):
    name = "full"


class WindowCache(CachePolicy):
    """Question entries plus the last W_l generated entries."""

    name = "window"

    def __init__(self, local_window: int, budget: float = INF, **kw):
        super().__init__(budget=budget, local_window=local_window, **kw)

    def _check_config(self, m: int) -> None:
        if m + self.local_window > self.budget:
            raise CacheError(f"M + W_l = {m + self.local_window} exceeds B={self.budget}")

    def maybe_evict(self) -> Optional[EvictionEvent]:
        gen = [e.position for e in self._entries.values() if e.phase != QUESTION]
        extra = len(gen) - self.local_window
        if extra <= 0:
            return None
        pre = self.total
        event = self._evict(gen[:extra], pre)
        event.retained = gen[extra:]
        return event


class SinkRecentCache(CachePolicy):
    """First n_sink positions plus the last W_l; the middle goes once the total reaches B."""

    name = "sink_recent"

    def __init__(self, budget: int, local_window: int, n_sink: int = 4, **kw):
        super().__init__(budget=budget, local_window=local_window, **kw)
        self.n_sink = n_sink

    def _check_config(self, m: int) -> None:
        if max(m, self.n_sink) + self.local_window >= self.budget:
            raise CacheError(
                f"sinks ({self.n_sink}) + question ({m}) + W_l ({self.local_window}) leave no room under B={self.budget}"
            )

    def maybe_evict(self) -> Optional[EvictionEvent]:
        if self.total < self.budget:
            return None
        ordered = self.positions
        sinks = set(ordered[: self.n_sink])
        local = set(self.local_positions())
        victims = [
            p for p in ordered
            if p not in sinks and p not in local and self._entries[p].phase != QUESTION
        ]
        if not victims:
            return None
        pre = self.total
        event = self._evict(victims, pre)
        event.retained = self.positions
        return event


class AccumAttentionCache(CachePolicy):
    """Heavy-hitter style: each entry's score is the attention it has received so far."""

    name = "accum_attention"

    def __init__(self, budget: int, local_window: int, ratio: float, **kw):
        super().__init__(budget=budget, local_window=local_window, **kw)
        self.ratio = ratio
        self.received: Dict[int, float] = {}

    def _check_config(self, m: int) -> None:
        w_s, k, k_evict = selection_split(self.budget, m, self.local_window, self.ratio)
        if w_s < 1 or k_evict < 1:
            raise CacheError(f"budget B={self.budget} too small for M={m}, W_l={self.local_window}")
        self.k_evict = k_evict

    def observe(self, step_output) -> None:
        if step_output is None:
            return
        pos, mass = step_output.received_mass()
        for p, m in zip(pos.tolist(), mass.tolist()):
            if p in self._entries:
                self.received[p] = self.received.get(p, 0.0) + m

    def maybe_evict(self) -> Optional[EvictionEvent]:
        if self.total < self.budget:
            return None
        local = set(self.local_positions())
        cand = [
            e for e in self._entries.values() if e.phase != QUESTION and e.position not in local
        ]
        # lowest accumulated attention first; ties evict the older entry
        cand.sort(key=lambda e: (self.received.get(e.position, 0.0), e.position))
        victims = [e.position for e in cand[: self.k_evict]]
        pre = self.total
        event = self._evict(victims, pre)
        for p in victims:
            self.received.pop(p, None)
        event.retained = sorted(set(self.positions) - local)
        return event


class RandomCache(CachePolicy):
    """Control: evicts K_evict uniformly random non-question entries once the total reaches B."""

    name = "random"

    def __init__(self, budget: int, k_evict: int, seed: int = 0, **kw):
        super().__init__(budget=budget, local_window=0, **kw)
        if k_evict < 1:
            raise CacheError("random policy needs K_evict >= 1")
        self.k_evict = k_evict
        self.rng = np.random.default_rng(seed)

    def _check_config(self, m: int) -> None:
        if m + self.k_evict > self.budget:
            raise CacheError(f"M + K_evict exceeds B={self.budget}")

    def maybe_evict(self) -> Optional[EvictionEvent]:
        if self.total < self.budget:
            return None
        cand = [e.position for e in self._entries.values() if e.phase != QUESTION]
        n = min(self.k_evict, len(cand))
        victims = sorted(self.rng.choice(cand, size=n, replace=False).tolist())
        pre = self.total
        event = self._evict(victims, pre)
        event.retained = self.positions
        return event


POLICIES = ("full", "window", "sink_recent", "accum_attention", "random", "dynts")


def make_baseline(name: str, budget: int, local_window: int, ratio: float,
                  prefill_len: int, n_sink: int = 4, seed: int = 0) -> CachePolicy:
    """Baselines configured at an equal budget B (window keeps its local window only)."""
    if name == "full":
        return FullCache()
    if name == "window":
        return WindowCache(local_window=local_window, budget=budget)
    if name == "sink_recent":
        return SinkRecentCache(budget=budget, local_window=local_window, n_sink=n_sink)
    if name == "accum_attention":
        return AccumAttentionCache(budget=budget, local_window=local_window, ratio=ratio)
    if name == "random":
        _, _, k_evict = selection_split(budget, prefill_len, local_window, ratio)
        return RandomCache(budget=budget, k_evict=max(k_evict, 1), seed=seed)
    if name == "dynts_fixed":
        return DualWindowCache(budget=budget, local_window=local_window, ratio=ratio)
    raise CacheError(f"unknown policy {name!r}; expected one of {POLICIES}")
