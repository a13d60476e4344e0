import numpy as np
import pytest

from dynts.importance import segment
from dynts.synthdata import (
    TaskError,
    TaskParams,
    Vocab,
    assemble_sequence,
    gen_dataset,
    gen_instance,
    read_jsonl,
    solve_from_critical,
    write_jsonl,
)

DEGENERATE = TaskParams(num_keys=1, num_distractor_pairs=0, filler_length=0, digits_per_value=1, seed=0)


def test_degenerate_instance():
    inst = gen_instance(DEGENERATE)
    v = DEGENERATE.vocab
    assert inst.trace[:2] == [v.key(0), Vocab.VAL] and len(inst.trace) == 3
    assert inst.answer == [inst.trace[2]]
    assert all(inst.critical_mask)
    seq = assemble_sequence(inst)
    assert len(seq) == len(inst.question) + 1 + 3 + 1 + 1 + 1


def test_determinism():
    p = TaskParams(seed=5)
    assert gen_instance(p) == gen_instance(p)
    a = gen_dataset(p, 10, seed=3)
    b = gen_dataset(p, 6, seed=7)
    assert a[4:] == b[:6]


def test_critical_count_by_construction():
    p = TaskParams(num_keys=4, num_distractor_pairs=3, filler_length=40, digits_per_value=2, seed=7)
    inst = gen_instance(p)
    assert sum(inst.critical_mask) == 4
    assert len(inst.trace) == p.trace_length


def test_dataset_single_and_batch():
    p = TaskParams()
    assert gen_dataset(p, 1, seed=9) == [gen_instance(p.with_seed(9))]
    batch = gen_dataset(p, 500, seed=0)
    assert len(batch) == 500
    assert len({sum(i.critical_mask) for i in batch}) == 1


def test_delimiters_bracket_trace_and_segment_roundtrip():
    for inst in gen_dataset(TaskParams(), 20, seed=1):
        seq = assemble_sequence(inst)
        q = len(inst.question)
        assert seq[q] == Vocab.THINK_OPEN and seq[q + 1 + len(inst.trace)] == Vocab.THINK_CLOSE
        seg = segment(seq)
        assert seg.sizes == (q, len(inst.trace), len(inst.answer))


def test_answer_recoverable_from_critical_tokens():
    for inst in gen_dataset(TaskParams(), 50, seed=2):
        assert solve_from_critical(inst) == inst.answer


def test_distractors_use_other_keys():
    for inst in gen_dataset(TaskParams(), 30, seed=3):
        keys = [t for t in inst.trace if TaskParams().vocab.key(0) <= t < TaskParams().vocab.key(0) + 8]
        assert keys.count(inst.query_key) == 1


def test_jsonl_roundtrip(tmp_path):
    insts = gen_dataset(TaskParams(), 5, seed=0)
    write_jsonl(insts, tmp_path / "d.jsonl")
    assert read_jsonl(tmp_path / "d.jsonl") == insts


def test_invalid_params():
    with pytest.raises(TaskError):
        TaskParams(num_keys=0)
    with pytest.raises(TaskError):
        gen_instance(TaskParams(filler_length=600))
    with pytest.raises(TaskError):
        gen_dataset(TaskParams(), 0)
