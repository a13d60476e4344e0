"""Segmentation, attention-derived importance and p% retention experiments.

A context token's importance is the attention it receives from the answer
tokens, summed over answer steps, layers and heads. Attention from answer
rows to delimiters, to answer tokens and to themselves is kept aside as
unscored mass, so scored + unscored = K_ans * L * H exactly.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cachemgr import CacheEntry, FullCache
from .synthdata import Instance, Vocab, assemble_sequence
from .toymodel import AttentionRecord, Model, forward_step, teacher_forced_cache


class SegmentError(ValueError):
    pass


@dataclass(frozen=True)
class Segments:
    q_len: int  # M; question occupies [0, M)
    open_pos: int
    close_pos: int
    answer_len: int  # K_ans, terminator excluded
    end_pos: Optional[int]  # ANSWER_END position if present

    @property
    def think_start(self) -> int:
        return self.open_pos + 1

    @property
    def think_len(self) -> int:
        return self.close_pos - self.open_pos - 1

    @property
    def think_positions(self) -> np.ndarray:
        return np.arange(self.think_start, self.close_pos)

    @property
    def answer_positions(self) -> np.ndarray:
        return np.arange(self.close_pos + 1, self.close_pos + 1 + self.answer_len)

    @property
    def sizes(self) -> Tuple[int, int, int]:
        return self.q_len, self.think_len, self.answer_len


def segment(tokens: Sequence[int], open_tok: int = Vocab.THINK_OPEN,
            close_tok: int = Vocab.THINK_CLOSE, end_tok: int = Vocab.ANSWER_END) -> Segments:
    toks = list(tokens)
    opens = [i for i, t in enumerate(toks) if t == open_tok]
    closes = [i for i, t in enumerate(toks) if t == close_tok]
    if not opens:
        raise SegmentError("missing THINK_OPEN")
    if len(opens) > 1:
        raise SegmentError("duplicated THINK_OPEN")
    if not closes:
        raise SegmentError("unterminated trace")
    if len(closes) > 1:
        raise SegmentError("duplicated THINK_CLOSE")
    o, c = opens[0], closes[0]
    if c < o:
        raise SegmentError("THINK_CLOSE before THINK_OPEN")
    if c == o + 1:
        raise SegmentError("empty think span")
    ends = [i for i, t in enumerate(toks) if t == end_tok and i > c]
    end = ends[0] if ends else None
    k_ans = (end if end is not None else len(toks)) - c - 1
    if k_ans < 1:
        raise SegmentError("empty answer span")
    return Segments(o, o, c, k_ans, end)


@dataclass
class ImportanceScores:
    raw: np.ndarray  # over positions [0, close); delimiter slot stays 0
    scored: np.ndarray  # bool mask over the same range: question and think positions
    unscored: float
    n_layers: int
    n_heads: int
    k_ans: int
    segments: Segments

    @property
    def total_mass(self) -> float:
        return float(self.raw[self.scored].sum()) + self.unscored

    @property
    def expected_mass(self) -> int:
        return self.k_ans * self.n_layers * self.n_heads

    def think(self) -> np.ndarray:
        s = self.segments
        return self.raw[s.think_start:s.close_pos]

    def question(self) -> np.ndarray:
        return self.raw[: self.segments.q_len]


def importance_scores(record: AttentionRecord, seg: Segments) -> ImportanceScores:
    by_pos = record.by_position()
    raw = np.zeros(seg.close_pos)
    scored = np.zeros(seg.close_pos, dtype=bool)
    scored[: seg.q_len] = True
    scored[seg.think_start: seg.close_pos] = True
    unscored = 0.0
    L = H = 0
    for a in seg.answer_positions.tolist():
        step = by_pos.get(a)
        if step is None:
            raise SegmentError(f"attention record is missing answer step at position {a}")
        L, H = step.weights.shape[:2]
        mass = step.weights.sum(axis=(0, 1))
        keys = step.keys
        inside = keys < seg.close_pos
        idx = keys[inside]
        ok = scored[idx]
        np.add.at(raw, idx[ok], mass[inside][ok])
        unscored += float(mass.sum() - mass[inside][ok].sum())
    return ImportanceScores(raw, scored, unscored, L, H, seg.answer_len, seg)


def normalize_labels(scores: ImportanceScores) -> np.ndarray:
    """Think-token labels: mean attention received per answer step per head."""
    return scores.think() / float(scores.expected_mass)


def select_count(p: float, n: int) -> int:
    if not 0 < p <= 100:
        raise ValueError(f"p must be in (0, 100], got {p}")
    # round first so float noise in p (e.g. 100 * k / n) cannot add a token
    return min(n, math.ceil(round(Fraction(str(p)) * n / 100, 9)))


def top_indices(scores: np.ndarray, count: int) -> np.ndarray:
    """Indices of the ``count`` highest scores; ties go to the later index."""
    idx = np.arange(scores.size)
    order = np.lexsort((-idx, -scores))
    return order[:count]


def retention_mask(scores: np.ndarray, strategy: str, p: float, seed: int = 0) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    n = s.size
    count = select_count(p, n)
    mask = np.zeros(n, dtype=bool)
    if strategy == "top":
        mask[top_indices(s, count)] = True
    elif strategy == "bottom":
        # same total order as top (later wins ties), taken from the low end
        idx = np.arange(n)
        mask[np.lexsort((idx, s))[:count]] = True
    elif strategy == "random":
        mask[np.random.default_rng(seed).choice(n, size=count, replace=False)] = True
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return mask


def precision_at_critical(think_scores: np.ndarray, critical_mask: Sequence[bool]) -> float:
    crit = np.asarray(critical_mask, dtype=bool)
    k = int(crit.sum())
    if k == 0:
        return 1.0
    return float(crit[top_indices(think_scores, k)].mean())


@dataclass
class TraceAnalysis:
    instance: Instance
    sequence: List[int]
    segments: Segments
    record: AttentionRecord
    hiddens: List[np.ndarray]
    scores: ImportanceScores
    entries: List[CacheEntry] = field(default_factory=list)

    @property
    def labels(self) -> np.ndarray:
        return normalize_labels(self.scores)

    def think_hiddens(self) -> np.ndarray:
        s = self.segments
        return np.stack(self.hiddens[s.think_start:s.close_pos])


def analyze(model: Model, inst: Instance) -> TraceAnalysis:
    seq = assemble_sequence(inst)
    seg = segment(seq)
    record, hiddens, entries = teacher_forced_cache(model, seq)
    return TraceAnalysis(inst, seq, seg, record, hiddens, importance_scores(record, seg), entries)


def _answer_from_cache(model: Model, entries: List[CacheEntry], close_pos: int, max_new: int) -> List[int]:
    """Feed THINK_CLOSE at its original position over a rebuilt cache and decode greedily."""
    cache = FullCache().init(entries)
    tok, pos, out_toks = Vocab.THINK_CLOSE, close_pos, []
    for _ in range(max_new):
        out = forward_step(model, cache.view(), tok, pos)
        cache.append(CacheEntry(pos, tok, out.keys, out.values), 0.0)
        tok = int(np.argmax(out.logits))
        if tok == Vocab.ANSWER_END:
            break
        out_toks.append(tok)
        pos += 1
    return out_toks


@dataclass
class RetentionTable:
    rows: List[Tuple[str, float, float]] = field(default_factory=list)  # (strategy, p, accuracy)
    n: int = 0
    full: float = 0.0

    def get(self, strategy: str, p: float) -> float:
        for s, pp, acc in self.rows:
            if s == strategy and pp == p:
                return acc
        raise KeyError((strategy, p))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strategy", "p", "accuracy", "n"])
        w.writerow(["full", 100, f"{self.full:.6f}", self.n])
        for s, p, acc in self.rows:
            w.writerow([s, p, f"{acc:.6f}", self.n])
        return buf.getvalue()


def retention_experiment(model: Model, instances: Sequence[Instance],
                         strategies: Sequence[str] = ("top", "random", "bottom"),
                         p_grid: Sequence[float] = (10, 20, 30, 50, 100),
                         seed: int = 0,
                         analyses: Optional[Sequence[TraceAnalysis]] = None) -> RetentionTable:
    """Keep question + p% of think tokens (original positions), then decode the answer."""
    hits: Dict[Tuple[str, float], int] = {(s, p): 0 for s in strategies for p in p_grid}
    full_hits = 0
    for n, inst in enumerate(instances):
        an = analyses[n] if analyses is not None else analyze(model, inst)
        seg = an.segments
        # keys/values from the full-cache pass depend only on their prefix
        base = an.entries
        q = [base[i] for i in range(seg.q_len)]
        think = [base[i] for i in seg.think_positions.tolist()]
        max_new = len(inst.answer) + 1
        full_entries = [base[i] for i in range(seg.close_pos)]
        full_hits += _answer_from_cache(model, _fresh(full_entries), seg.close_pos, max_new) == inst.answer
        ts = an.scores.think()
        for s in strategies:
            for p in p_grid:
                m = retention_mask(ts, s, p, seed=seed * 100003 + n)
                ent = q + [e for e, keep in zip(think, m) if keep]
                got = _answer_from_cache(model, _fresh(ent), seg.close_pos, max_new)
                hits[(s, p)] += got == inst.answer
    n_inst = len(instances)
    table = RetentionTable(n=n_inst, full=full_hits / n_inst)
    for s in strategies:
        for p in p_grid:
            table.rows.append((s, p, hits[(s, p)] / n_inst))
    return table


def _fresh(entries: List[CacheEntry]) -> List[CacheEntry]:
    return [CacheEntry(e.position, e.token, e.keys, e.values) for e in entries]


def scores_csv(trace_id: int, an: TraceAnalysis) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trace_id", "position", "segment", "token", "raw_I", "label", "critical_gt"])
    seg = an.segments
    crit = set(an.instance.critical_positions)
    norm = float(an.scores.expected_mass)
    for pos in range(seg.close_pos):
        if pos < seg.q_len:
            name = "question"
        elif pos == seg.open_pos:
            continue
        else:
            name = "think"
        raw = float(an.scores.raw[pos])
        w.writerow([trace_id, pos, name, an.sequence[pos], repr(raw), repr(raw / norm), int(pos in crit)])
    return buf.getvalue()
