import numpy as np
import pytest

from dynts.cachemgr import CacheView, FullCache, WindowCache
from dynts.importance import analyze
from dynts.synthdata import TaskParams, Vocab, assemble_sequence, gen_dataset, gen_instance
from dynts.toymodel import (
    AttentionRecord,
    FlopCounter,
    LayerWeights,
    Model,
    ModelConfig,
    ModelError,
    build_planted_model,
    build_random_model,
    build_scripted_model,
    decode,
    decode_instance,
    forward_step,
    planted_config,
    teacher_forced_trace,
)


def _view(keys, values, positions):
    keys = np.asarray(keys, dtype=float)[:, None, :]
    values = np.asarray(values, dtype=float)[:, None, :]
    return CacheView(np.asarray(positions), np.zeros(len(positions), dtype=np.int64), keys, values)


def test_empty_cache_attends_self():
    m = build_random_model(ModelConfig(n_layers=2, n_heads=2, d_model=8, vocab_size=10), seed=0)
    out = forward_step(m, CacheView.from_entries([], 2, 8), 3, 0)
    np.testing.assert_array_equal(out.attention, np.ones((2, 2, 1)))


def test_matching_key_gets_near_argmax_attention():
    cfg = ModelConfig(n_layers=1, n_heads=1, d_model=4, vocab_size=4, rotary_dim=0)
    eye = np.eye(4)
    zero = np.zeros((4, 4))
    m = Model(cfg, eye, [LayerWeights(20.0 * eye, zero, eye, zero)], eye)
    view = _view([eye[0], eye[1]], [eye[2], eye[3]], [0, 1])
    out = forward_step(m, view, 0, 2)
    a = out.attention[0, 0]
    # logits 10, 0, 0 after the 1/sqrt(4) scale
    np.testing.assert_allclose(a, np.exp([10, 0, 0]) / np.exp([10, 0, 0]).sum())
    assert a[0] > 0.999


def test_forward_is_pure_and_deterministic():
    m = build_random_model(ModelConfig(n_layers=2, n_heads=2, d_model=8, vocab_size=10), seed=1)
    rec, _ = teacher_forced_trace(m, [1, 2, 3, 4])
    a = decode(m, [1, 2], FullCache(), max_steps=5)
    b = decode(m, [1, 2], FullCache(), max_steps=5)
    assert a.tokens == b.tokens
    assert all(np.array_equal(x, y) for x, y in zip(a.hiddens, b.hiddens))
    assert len(rec) == 4


def test_position_collision_and_bounds():
    m = build_random_model(ModelConfig(n_layers=1, n_heads=1, d_model=4, vocab_size=6, max_pos=8), seed=0)
    view = _view([np.ones(4)], [np.ones(4)], [3])
    with pytest.raises(ModelError):
        forward_step(m, view, 1, 3)
    with pytest.raises(ModelError):
        forward_step(m, view, 1, 8)
    with pytest.raises(ModelError):
        forward_step(m, view, 9, 4)


def test_rotary_relative_positions_only():
    # shifting every position leaves the attention pattern unchanged
    m = build_random_model(ModelConfig(n_layers=2, n_heads=2, d_model=8, vocab_size=10), seed=2)
    toks = [3, 1, 4, 1, 5]

    def run(offset):
        c = FullCache().init([])
        out = None
        for i, t in enumerate(toks):
            out = forward_step(m, c.view(), t, i + offset)
            from dynts.cachemgr import CacheEntry
            c.append(CacheEntry(i + offset, t, out.keys, out.values), 0.0)
        return out.attention

    np.testing.assert_allclose(run(0), run(37), atol=1e-10)


def test_flop_counter_per_step():
    cfg = ModelConfig(n_layers=3, n_heads=2, d_model=8, vocab_size=10)
    m = build_random_model(cfg, seed=0)
    counter = FlopCounter()
    res = decode(m, [1, 2, 3], FullCache(), max_steps=6, forced=[4] * 6, counter=counter)
    assert counter.per_step == [4 * 3 * 8 * s for s in res.pre_lengths]


def test_decode_max_steps_one():
    m = build_random_model(ModelConfig(n_layers=1, n_heads=1, d_model=4, vocab_size=6), seed=0)
    assert len(decode(m, [1, 2], FullCache(), max_steps=1).tokens) == 1
    with pytest.raises(ModelError):
        decode(m, [1], max_steps=0)


def test_scripted_teacher_forcing_reproduces_answer(task, small_cfg):
    for inst in gen_dataset(task, 5, seed=0):
        m = build_scripted_model(small_cfg, inst, eps=0.1)
        assert decode_instance(m, inst, FullCache()).answer() == inst.answer


def test_scripted_eps0_no_mass_off_critical(task, small_cfg):
    inst = gen_instance(task)
    m = build_scripted_model(small_cfg, inst, eps=0.0)
    seq = assemble_sequence(inst)
    rec, _ = teacher_forced_trace(m, seq)
    close = seq.index(Vocab.THINK_CLOSE)
    crit = set(inst.critical_positions)
    for st in rec.steps:
        if st.position > close:
            off = [k for k, p in enumerate(st.keys.tolist()) if p not in crit]
            assert not np.any(st.weights[:, :, off])


def test_scripted_fails_without_critical(task, small_cfg):
    inst = gen_instance(task)
    m = build_scripted_model(small_cfg, inst)
    assert decode_instance(m, inst, WindowCache(4, budget=10)).answer() != inst.answer


def test_attention_record_jsonl_roundtrip(task, small_cfg):
    inst = gen_instance(task)
    rec, _ = teacher_forced_trace(build_scripted_model(small_cfg, inst), assemble_sequence(inst)[:6])
    back = AttentionRecord.from_jsonl(rec.to_jsonl())
    assert len(back) == len(rec)
    for a, b in zip(rec.steps, back.steps):
        np.testing.assert_array_equal(a.weights, b.weights)
        np.testing.assert_array_equal(a.keys, b.keys)


def test_planted_degenerate_instance():
    tp = TaskParams(num_keys=1, num_distractor_pairs=0, filler_length=0, digits_per_value=1)
    m = build_planted_model(tp, planted_config(tp))
    for inst in gen_dataset(tp, 5, seed=0):
        assert decode_instance(m, inst).answer() == inst.answer


def test_planted_accuracy_three_distractors():
    tp = TaskParams(num_distractor_pairs=3)
    m = build_planted_model(tp, planted_config(tp))
    insts = gen_dataset(tp, 200, seed=100)
    assert all(decode_instance(m, i).answer() == i.answer for i in insts)


def test_planted_answer_mass_on_critical(task, planted):
    for inst in gen_dataset(task, 10, seed=50):
        an = analyze(planted, inst)
        crit = np.asarray(inst.critical_positions)
        frac = an.scores.raw[crit].sum() / an.scores.expected_mass
        assert frac >= 0.9


def test_planted_rejects_small_config(task):
    with pytest.raises(ModelError):
        build_planted_model(task, planted_config(task, d_model=16))
