"""Needle-trace retrieval task.

The question names one key marker; the thinking trace hides several
``K VAL d..d`` bindings among filler runs; the answer is the digits bound to
the queried key. The queried binding's tokens are the ground-truth critical set.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np

STRUCTURAL = ("PAD", "QUESTION", "THINK_OPEN", "THINK_CLOSE", "ANSWER_END", "VAL")


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    num_keys: int = 8
    num_fillers: int = 8

    def __post_init__(self) -> None:
        if self.num_keys < 1 or self.num_fillers < 1:
            raise TaskError("vocab needs at least one key and one filler symbol")
        if self.size > 256:
            raise TaskError(f"vocab size {self.size} exceeds 256")

    @property
    def symbols(self) -> List[str]:
        return (
            list(STRUCTURAL)
            + [str(i) for i in range(10)]
            + [f"K{i}" for i in range(self.num_keys)]
            + [f"F{i}" for i in range(self.num_fillers)]
        )

    @property
    def size(self) -> int:
        return len(STRUCTURAL) + 10 + self.num_keys + self.num_fillers

    def id(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise KeyError(symbol) from None

    def symbol(self, token: int) -> str:
        return self.symbols[token]

    PAD = 0
    QUESTION = 1
    THINK_OPEN = 2
    THINK_CLOSE = 3
    ANSWER_END = 4
    VAL = 5
    DIGIT0 = 6

    def digit(self, n: int) -> int:
        return self.DIGIT0 + n

    def key(self, i: int) -> int:
        return self.DIGIT0 + 10 + i

    def filler(self, i: int) -> int:
        return self.DIGIT0 + 10 + self.num_keys + i

    @property
    def digit_ids(self) -> range:
        return range(self.DIGIT0, self.DIGIT0 + 10)

    @property
    def key_ids(self) -> range:
        return range(self.key(0), self.key(0) + self.num_keys)

    @property
    def filler_ids(self) -> range:
        return range(self.filler(0), self.filler(0) + self.num_fillers)

    def decode(self, tokens: Iterable[int]) -> str:
        return " ".join(self.symbol(t) for t in tokens)


@dataclass(frozen=True)
class TaskParams:
    num_keys: int = 8
    num_distractor_pairs: int = 5
    filler_length: int = 60
    digits_per_value: int = 2
    seed: int = 0
    num_fillers: int = 8
    max_pos: int = 512

    def __post_init__(self) -> None:
        if self.num_keys < 1 or self.digits_per_value < 1:
            raise TaskError("num_keys and digits_per_value must be >= 1")
        if self.num_distractor_pairs < 0 or self.filler_length < 0:
            raise TaskError("num_distractor_pairs and filler_length must be >= 0")
        if self.num_distractor_pairs > self.num_keys - 1:
            raise TaskError(
                f"num_distractor_pairs={self.num_distractor_pairs} needs at least "
                f"{self.num_distractor_pairs + 1} keys (num_keys={self.num_keys})"
            )

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.num_keys, self.num_fillers)

    @property
    def pair_length(self) -> int:
        return 2 + self.digits_per_value

    @property
    def trace_length(self) -> int:
        return (self.num_distractor_pairs + 1) * self.pair_length + self.filler_length

    @property
    def sequence_length(self) -> int:
        # QUESTION Kq THINK_OPEN trace THINK_CLOSE answer ANSWER_END
        return 2 + 1 + self.trace_length + 1 + self.digits_per_value + 1

    @property
    def binding_capacity(self) -> int:
        return self.num_keys * 10**self.digits_per_value

    def with_seed(self, seed: int) -> "TaskParams":
        return TaskParams(**{**asdict(self), "seed": seed})


@dataclass
class Instance:
    seed: int
    question: List[int]
    trace: List[int]
    answer: List[int]
    critical_mask: List[bool]
    query_key: int = field(default=-1)

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "question": self.question,
                "trace": self.trace,
                "answer": self.answer,
                "critical_mask": self.critical_mask,
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "Instance":
        obj = json.loads(line)
        return cls(
            seed=int(obj["seed"]),
            question=[int(t) for t in obj["question"]],
            trace=[int(t) for t in obj["trace"]],
            answer=[int(t) for t in obj["answer"]],
            critical_mask=[bool(b) for b in obj["critical_mask"]],
            query_key=int(obj["question"][1]) if len(obj["question"]) > 1 else -1,
        )

    @property
    def critical_positions(self) -> List[int]:
        """Absolute positions of critical tokens in the assembled sequence."""
        base = len(self.question) + 1
        return [base + j for j, c in enumerate(self.critical_mask) if c]


def _binding(params: TaskParams, seed: int):
    """Bijective seed -> (key, digits) map over the binding capacity."""
    cap = params.binding_capacity
    a = 7919 % cap or 1
    while math.gcd(a, cap) != 1:
        a += 1
    idx = (a * (seed % cap) + 104729) % cap
    key, val = divmod(idx, 10**params.digits_per_value)
    digits = [int(c) for c in str(val).zfill(params.digits_per_value)]
    return key, digits


def gen_instance(params: TaskParams) -> Instance:
    if params.sequence_length > params.max_pos:
        raise TaskError(
            f"sequence length {params.sequence_length} exceeds max_pos={params.max_pos}"
        )
    v = params.vocab
    rng = np.random.default_rng([params.seed, 0x5EED])
    qkey, qdigits = _binding(params, params.seed)
    others = [k for k in range(params.num_keys) if k != qkey]
    dkeys = rng.choice(others, size=params.num_distractor_pairs, replace=False) if others else []
    pairs = [(qkey, qdigits, True)]
    for k in dkeys:
        pairs.append((int(k), [int(x) for x in rng.integers(0, 10, params.digits_per_value)], False))
    order = rng.permutation(len(pairs))
    # split filler_length into len(pairs)+1 runs (possibly empty)
    cuts = np.sort(rng.integers(0, params.filler_length + 1, size=len(pairs)))
    runs = np.diff(np.concatenate([[0], cuts, [params.filler_length]]))

    trace: List[int] = []
    mask: List[bool] = []

    def filler_run(n: int) -> None:
        for f in rng.integers(0, params.num_fillers, size=n):
            trace.append(v.filler(int(f)))
            mask.append(False)

    for slot, pi in enumerate(order):
        filler_run(int(runs[slot]))
        key, digits, crit = pairs[pi]
        toks = [v.key(key), v.VAL] + [v.digit(x) for x in digits]
        trace.extend(toks)
        mask.extend([crit] * len(toks))
    filler_run(int(runs[-1]))

    return Instance(
        seed=params.seed,
        question=[v.QUESTION, v.key(qkey)],
        trace=trace,
        answer=[v.digit(x) for x in qdigits],
        critical_mask=mask,
        query_key=v.key(qkey),
    )


def gen_dataset(params: TaskParams, n: int, seed: int | None = None) -> List[Instance]:
    if n < 1:
        raise TaskError("gen_dataset: n must be >= 1")
    if n > params.binding_capacity:
        raise TaskError(
            f"n={n} exceeds the {params.binding_capacity} distinct (query, binding) pairs available"
        )
    start = params.seed if seed is None else seed
    return [gen_instance(params.with_seed(start + i)) for i in range(n)]


def assemble_sequence(inst: Instance) -> List[int]:
    return (
        list(inst.question)
        + [Vocab.THINK_OPEN]
        + list(inst.trace)
        + [Vocab.THINK_CLOSE]
        + list(inst.answer)
        + [Vocab.ANSWER_END]
    )


def solve_from_critical(inst: Instance) -> List[int]:
    """Re-derive the answer from the question and the critical-masked trace tokens only."""
    kept = [t for t, c in zip(inst.trace, inst.critical_mask) if c]
    qkey = inst.question[1]
    for i, t in enumerate(kept):
        if t == qkey and i + 1 < len(kept) and kept[i + 1] == Vocab.VAL:
            out = []
            for t2 in kept[i + 2:]:
                if Vocab.DIGIT0 <= t2 < Vocab.DIGIT0 + 10:
                    out.append(t2)
                else:
                    break
            return out
    return []


def write_jsonl(instances: Sequence[Instance], path: Path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for inst in instances:
            fh.write(inst.to_json() + "\n")


def read_jsonl(path: Path) -> List[Instance]:
    with Path(path).open() as fh:
        return [Instance.from_json(line) for line in fh if line.strip()]
