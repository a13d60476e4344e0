"""Small decoder-only transformer with an explicit KV cache.

Three model sources share ``forward_step``:

* ``planted``: hand-set weights implementing a retrieval circuit for the
  needle-trace task (layer 1 builds offset/token features, later layers look
  up the queried binding, the last MLP reads the answer out);
* ``scripted``: attention rows fabricated from an instance's critical mask;
* ``random``: Gaussian weights, for property tests.

No layer norm: the planted circuit relies on exact linear bookkeeping.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cachemgr import CacheEntry, CachePolicy, CacheView, EvictionEvent, FullCache
from .numkernel import ROPE_BASE, ShapeError, rope_frequencies, rotary_heads, softmax_rows
from .synthdata import Instance, TaskParams, Vocab, assemble_sequence


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 12
    n_heads: int = 4
    d_model: int = 128
    vocab_size: int = 32
    max_pos: int = 512
    rotary_dim: Optional[int] = None  # per head; None = whole head
    rope_base: float = ROPE_BASE
    d_mlp: Optional[int] = None

    def __post_init__(self) -> None:
        if min(self.n_layers, self.n_heads, self.d_model, self.vocab_size) < 1:
            raise ModelError("n_layers, n_heads, d_model and vocab_size must be >= 1")
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.rot_dim % 2 or self.rot_dim > self.d_head:
            raise ModelError(f"rotary_dim={self.rot_dim} must be even and <= d_head={self.d_head}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def rot_dim(self) -> int:
        return self.d_head if self.rotary_dim is None else self.rotary_dim

    @property
    def mlp_dim(self) -> int:
        return 4 * self.d_model if self.d_mlp is None else self.d_mlp


@dataclass
class LayerWeights:
    wq: np.ndarray  # (d, d)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_in: Optional[np.ndarray] = None  # (m, d); None = no MLP in this block
    b_in: Optional[np.ndarray] = None
    w_out: Optional[np.ndarray] = None  # (d, m)


@dataclass
class ScriptSpec:
    instance: Instance
    eps: float = 0.1
    noise: float = 0.1
    salience: str = "uniform"  # or "token": filler share weighted by 2**(token % 8)
    seed: int = 0
    crit_scale: float = 2.0


@dataclass
class Model:
    config: ModelConfig
    embed: np.ndarray  # (V, d)
    layers: List[LayerWeights]
    unembed: np.ndarray  # (V, d)
    variant: str = "random"
    script: Optional[ScriptSpec] = None

    def __post_init__(self) -> None:
        c = self.config
        if self.embed.shape != (c.vocab_size, c.d_model) or self.unembed.shape != (c.vocab_size, c.d_model):
            raise ModelError("embedding shapes do not match config")
        if len(self.layers) != c.n_layers:
            raise ModelError(f"expected {c.n_layers} layers, got {len(self.layers)}")
        for lw in self.layers:
            for w in (lw.wq, lw.wk, lw.wv, lw.wo):
                if w.shape != (c.d_model, c.d_model):
                    raise ModelError("projection shapes do not match config")
        self._freqs = rope_frequencies(c.rot_dim, c.rope_base) if c.rot_dim else None

    def checksum(self) -> float:
        tot = float(np.sum(self.embed)) + float(np.sum(self.unembed))
        for lw in self.layers:
            for w in (lw.wq, lw.wk, lw.wv, lw.wo, lw.w_in, lw.w_out):
                if w is not None:
                    tot += float(np.sum(w * w))
        return tot


@dataclass
class FlopCounter:
    """Multiply-adds executed by the attention kernels (QK^T and softmax*V)."""

    qk_macs: int = 0
    av_macs: int = 0
    per_step: List[int] = field(default_factory=list)

    def add(self, qk: int, av: int) -> None:
        self.qk_macs += qk
        self.av_macs += av

    def end_step(self, before: int) -> None:
        self.per_step.append(self.flops - before)

    @property
    def flops(self) -> int:
        return 2 * (self.qk_macs + self.av_macs)


@dataclass
class StepOutput:
    logits: np.ndarray  # (V,)
    hidden: np.ndarray  # (d,)
    attention: np.ndarray  # (L, H, S+1) over ``positions``
    positions: np.ndarray  # (S+1,) cache positions then self
    keys: np.ndarray  # (L, d) new entry
    values: np.ndarray  # (L, d)

    def received_mass(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.positions, self.attention.sum(axis=(0, 1))


@dataclass
class StepAttention:
    position: int
    token: int
    keys: np.ndarray  # (S+1,)
    weights: np.ndarray  # (L, H, S+1)

    def to_dict(self) -> dict:
        L, H, _ = self.weights.shape
        keys = self.keys.tolist()
        rows = [
            {"layer": l, "head": h, "keys": keys, "weights": self.weights[l, h].tolist()}
            for l in range(L)
            for h in range(H)
        ]
        return {"position": self.position, "token": self.token, "rows": rows}


@dataclass
class AttentionRecord:
    steps: List[StepAttention] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    def by_position(self) -> Dict[int, StepAttention]:
        return {s.position: s for s in self.steps}

    def to_jsonl(self) -> str:
        return "".join(json.dumps(s.to_dict(), separators=(",", ":")) + "\n" for s in self.steps)

    @classmethod
    def from_jsonl(cls, text: str) -> "AttentionRecord":
        steps = []
        for line in text.splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            rows = obj["rows"]
            L = 1 + max(r["layer"] for r in rows)
            H = 1 + max(r["head"] for r in rows)
            keys = np.asarray(rows[0]["keys"], dtype=np.int64)
            w = np.zeros((L, H, keys.size))
            for r in rows:
                if r["keys"] != rows[0]["keys"]:
                    raise ModelError("rows of one step must share key positions")
                w[r["layer"], r["head"]] = r["weights"]
            steps.append(StepAttention(int(obj["position"]), int(obj["token"]), keys, w))
        return cls(steps)


# ---------------------------------------------------------------------------
# forward step


def forward_step(model: Model, view: CacheView, token: int, position: int,
                 counter: Optional[FlopCounter] = None) -> StepOutput:
    """One incremental decoding step. Pure: the cache view is read, never written."""
    c = model.config
    if not 0 <= token < c.vocab_size:
        raise ModelError(f"token {token} outside vocab of size {c.vocab_size}")
    if position >= c.max_pos or position < 0:
        raise ModelError(f"position {position} outside [0, {c.max_pos})")
    n = len(view)
    if n and position <= int(view.positions[-1]):
        raise ModelError(
            f"position collision: {position} not greater than cached position {int(view.positions[-1])}"
        )
    positions = np.append(view.positions, position)
    if model.variant == "scripted":
        return _scripted_step(model, view, token, position, positions)

    L, H, dh, d = c.n_layers, c.n_heads, c.d_head, c.d_model
    scale = 1.0 / np.sqrt(dh)
    x = model.embed[token].copy()
    k_new = np.empty((L, d))
    v_new = np.empty((L, d))
    attn = np.empty((L, H, n + 1))
    for l, lw in enumerate(model.layers):
        q = rotary_heads((lw.wq @ x).reshape(H, dh), position, c.rot_dim, c.rope_base)
        k = rotary_heads((lw.wk @ x).reshape(H, dh), position, c.rot_dim, c.rope_base)
        v = (lw.wv @ x).reshape(H, dh)
        k_new[l] = k.reshape(d)
        v_new[l] = v.reshape(d)
        if n:
            ks = view.keys[:, l, :].reshape(n, H, dh)
            vs = view.values[:, l, :].reshape(n, H, dh)
            logits = np.empty((H, n + 1))
            logits[:, :n] = np.einsum("hd,shd->hs", q, ks)
            logits[:, n] = np.einsum("hd,hd->h", q, k)
            a = softmax_rows(logits * scale)
            mix = np.einsum("hs,shd->hd", a[:, :n], vs) + a[:, n:] * v
        else:
            a = np.ones((H, 1))
            mix = v
        if counter is not None:
            counter.add(H * dh * (n + 1), H * dh * (n + 1))
        attn[l] = a
        x = x + lw.wo @ mix.reshape(d)
        if lw.w_in is not None:
            x = x + lw.w_out @ np.maximum(lw.w_in @ x + lw.b_in, 0.0)
    logits = model.unembed @ x
    return StepOutput(logits, x, attn, positions, k_new, v_new)


# ---------------------------------------------------------------------------
# scripted oracle


def _scripted_step(model: Model, view: CacheView, token: int, position: int,
                   positions: np.ndarray) -> StepOutput:
    c = model.config
    sp = model.script
    inst = sp.instance
    seq = assemble_sequence(inst)
    q_len = len(inst.question)
    close = q_len + 1 + len(inst.trace)
    crit = set(inst.critical_positions)

    w = np.zeros(positions.size)
    if position > close:
        is_crit = np.array([p in crit for p in positions.tolist()])
        is_think = (positions > q_len) & (positions < close) & ~is_crit
        if sp.salience == "token":
            toks = np.append(view.tokens, token)
            sal = 2.0 ** (toks % 8)
        else:
            sal = np.ones(positions.size)
        nc, nt = int(is_crit.sum()), int(is_think.sum())
        if nc and nt:
            w[is_crit] = (1.0 - sp.eps) / nc
            w[is_think] = sp.eps * sal[is_think] / sal[is_think].sum()
        elif nc:
            w[is_crit] = 1.0 / nc
        elif nt:
            w[is_think] = sal[is_think] / sal[is_think].sum()
        else:
            w[:] = 1.0 / w.size
    else:
        w[:] = 1.0 / w.size
    attn = np.broadcast_to(w, (c.n_layers, c.n_heads, w.size)).copy()

    logits = np.zeros(c.vocab_size)
    nxt = seq[position + 1] if position + 1 < len(seq) else Vocab.ANSWER_END
    present = set(positions.tolist())
    if position < close or crit <= present:
        logits[nxt] = 10.0
    else:
        logits[Vocab.PAD] = 10.0  # a lost binding leaves nothing to copy

    rng = np.random.default_rng([sp.seed, position, token])
    is_c = 1.0 if position in crit else 0.0
    h = model.embed[token] + is_c * sp.crit_scale * model.unembed[0] + sp.noise * rng.normal(size=c.d_model)
    kv = np.broadcast_to(h, (c.n_layers, c.d_model)).copy()
    return StepOutput(logits, h, attn, positions, kv, kv.copy())


def build_scripted_model(config: ModelConfig, instance: Instance, eps: float = 0.1,
                         noise: float = 0.1, salience: str = "uniform", seed: int = 0) -> Model:
    """Attention fabricated from the instance's critical mask.

    Answer rows put (1 - eps) uniformly on critical positions and eps on the
    other think tokens; every other row is uniform. Logits replay the instance
    and fail (PAD) in the answer phase once any critical entry is gone. The
    hidden state is a fixed token embedding plus a critical-flag direction plus
    seeded noise.
    """
    if not 0.0 <= eps <= 1.0:
        raise ModelError("eps must be in [0, 1]")
    if salience not in ("uniform", "token"):
        raise ModelError(f"unknown salience mode {salience!r}")
    rng = np.random.default_rng([seed, 0xC0DE])
    d = config.d_model
    embed = rng.normal(0.0, 1.0, (config.vocab_size, d))
    flag = rng.normal(0.0, 1.0, d)
    unembed = np.zeros((config.vocab_size, d))
    unembed[0] = flag / np.linalg.norm(flag)  # row 0 doubles as the critical direction
    zero = np.zeros((d, d))
    layers = [LayerWeights(zero, zero, zero, zero) for _ in range(config.n_layers)]
    return Model(config, embed, layers, unembed, "scripted",
                 ScriptSpec(instance, eps, noise, salience, seed))


def rebind(model: Model, instance: Instance) -> Model:
    """Same scripted model (weights, eps, noise) bound to another instance."""
    sp = model.script
    return Model(model.config, model.embed, model.layers, model.unembed, "scripted",
                 ScriptSpec(instance, sp.eps, sp.noise, sp.salience, sp.seed, sp.crit_scale))


def build_random_model(config: ModelConfig, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    d, m = config.d_model, config.mlp_dim
    s = 1.0 / np.sqrt(d)
    layers = [
        LayerWeights(
            rng.normal(0, s, (d, d)), rng.normal(0, s, (d, d)),
            rng.normal(0, s, (d, d)), rng.normal(0, s, (d, d)),
            rng.normal(0, s, (m, d)), np.zeros(m), rng.normal(0, 1.0 / np.sqrt(m), (d, m)),
        )
        for _ in range(config.n_layers)
    ]
    return Model(config, rng.normal(0, 1, (config.vocab_size, d)), layers,
                 rng.normal(0, s, (config.vocab_size, d)), "random")


# ---------------------------------------------------------------------------
# planted circuit

PLANTED_ROTARY = 16
MARGIN = 40.0  # logit gap between an intended target and its best competitor


class _Layout:
    """Residual-stream channel map for the planted circuit."""

    def __init__(self, task: TaskParams):
        v = task.vocab
        self.vocab = v
        self.D = task.digits_per_value
        self.nk = task.num_keys
        self.offsets = list(range(1, self.D + 2))
        # compressed token features carried by the offset channels
        self.feats = list(v.key_ids) + [v.VAL, v.THINK_CLOSE, v.QUESTION]
        self.nf = len(self.feats)
        i = v.size
        self.E = 0
        self.ONE = i
        i += 1
        self.P = {}
        for dlt in self.offsets:
            self.P[dlt] = i
            i += self.nf
        self.QK = i
        i += self.nk
        self.O = []
        for _ in range(self.D):
            self.O.append(i)
            i += 10
        self.OUT = i
        i += 10
        self.END = i
        self.CRIT = i + 1
        self.QKA = i + 2  # question key, answer rows only
        self.width = i + 2 + self.nk

    def p(self, dlt: int, tok: int) -> int:
        return self.P[dlt] + self.feats.index(tok)

    def p_key(self, dlt: int, k: int) -> int:
        return self.P[dlt] + k


def _answer_row_channels(lay: _Layout) -> List[int]:
    """Channels summing to 1 on THINK_CLOSE and answer-digit rows, 0 elsewhere."""
    v = lay.vocab
    return [v.THINK_CLOSE] + [lay.p(dlt, v.THINK_CLOSE) for dlt in range(1, lay.D + 1)]


def planted_config(task: TaskParams, n_layers: int = 12, d_model: int = 128) -> ModelConfig:
    n_heads = task.digits_per_value + 2
    step = n_heads * 2 // math.gcd(n_heads, 2)  # even d divisible by the head count
    return ModelConfig(
        n_layers=n_layers,
        n_heads=n_heads,
        d_model=-(-d_model // step) * step,
        vocab_size=task.vocab.size,
        max_pos=task.max_pos,
        rotary_dim=PLANTED_ROTARY,
        d_mlp=max(64, 4 * (task.digits_per_value * 10 + (task.digits_per_value + 2) * task.num_keys + 1)),
    )


def _offset_scale(freqs: np.ndarray, max_pos: int, max_ahead: int) -> float:
    npair = freqs.size
    dl = np.arange(-max_ahead, max_pos + 1)
    dl = dl[dl != 0]
    gap = np.min(npair - np.cos(np.outer(dl, freqs)).sum(axis=1))
    return MARGIN / gap


def build_planted_model(task: TaskParams, config: ModelConfig) -> Model:
    """Hand-set weights that solve the needle-trace task by retrieval.

    Layer 1: heads 1..D+1 copy the token ``delta`` positions back into offset
    channels; the last head fetches the question key. Layers 2..L: head o looks
    up the o-th token of a binding. Answer rows (THINK_CLOSE and answer
    digits) query with the question key and hit only the matching binding;
    trace rows query every key and spread over all bindings, with a null key
    on the QUESTION token absorbing the rest. The final MLP maps copied digits
    to the output for the current answer index and sets a critical-token flag.
    """
    lay = _Layout(task)
    c = config
    D, nk, v = lay.D, lay.nk, lay.vocab
    need_heads = D + 2
    need_dh = PLANTED_ROTARY + lay.nf
    need_mlp = 10 * D + 1 + nk * (D + 2)
    problems = []
    if c.n_layers < 2:
        problems.append("n_layers >= 2")
    if c.n_heads < need_heads:
        problems.append(f"n_heads >= {need_heads}")
    if c.d_model < lay.width:
        problems.append(f"d_model >= {lay.width}")
    if c.d_head < need_dh:
        problems.append(f"d_head >= {need_dh}")
    if c.rot_dim != PLANTED_ROTARY:
        problems.append(f"rotary_dim == {PLANTED_ROTARY}")
    if c.mlp_dim < need_mlp:
        problems.append(f"d_mlp >= {need_mlp}")
    if c.vocab_size != v.size:
        problems.append(f"vocab_size == {v.size}")
    if problems:
        raise ModelError("config too small for the planted circuit; need " + ", ".join(problems))

    d, H, dh, L = c.d_model, c.n_heads, c.d_head, c.n_layers
    sq = np.sqrt(dh)  # undo the 1/sqrt(d_head) attention scale
    freqs = rope_frequencies(PLANTED_ROTARY, c.rope_base)
    npair = freqs.size

    embed = np.zeros((v.size, d))
    embed[np.arange(v.size), np.arange(v.size)] = 1.0
    embed[:, lay.ONE] = 1.0

    def hd(h: int, j: int) -> int:
        return h * dh + j

    # ---- layer 1: offsets and question key
    wq, wk, wv, wo = (np.zeros((d, d)) for _ in range(4))
    s_off = _offset_scale(freqs, c.max_pos, D + 1) * sq
    for h, dlt in enumerate(lay.offsets):
        for j in range(npair):
            ang = -freqs[j] * dlt
            wq[hd(h, 2 * j), lay.ONE] = np.cos(ang) * s_off
            wq[hd(h, 2 * j + 1), lay.ONE] = np.sin(ang) * s_off
            wk[hd(h, 2 * j), lay.ONE] = 1.0
        for f, tok in enumerate(lay.feats):
            wv[hd(h, PLANTED_ROTARY + f), tok] = 1.0
            wo[lay.P[dlt] + f, hd(h, PLANTED_ROTARY + f)] = 1.0
    hq = D + 1
    th = freqs[-1]
    s_g = MARGIN / (th * np.cos(th * c.max_pos))
    s_c = s_g * np.sin(th * c.max_pos) + 2 * MARGIN
    jlow = npair - 1
    wq[hd(hq, 2 * jlow), lay.ONE] = 0.0
    wq[hd(hq, 2 * jlow + 1), lay.ONE] = -s_g * sq
    wk[hd(hq, 2 * jlow), lay.ONE] = 1.0
    wq[hd(hq, PLANTED_ROTARY), lay.ONE] = s_c * sq
    for kk in range(nk):
        wk[hd(hq, PLANTED_ROTARY), v.key(kk)] = 1.0
        wv[hd(hq, PLANTED_ROTARY + 1 + kk), v.key(kk)] = 1.0
        wo[lay.QK + kk, hd(hq, PLANTED_ROTARY + 1 + kk)] = 1.0
    # layer-1 MLP: gate the question key to answer rows
    m = c.mlp_dim
    w_in1 = np.zeros((m, d))
    b_in1 = np.zeros(m)
    w_out1 = np.zeros((d, m))
    for kk in range(nk):
        w_in1[kk, lay.QK + kk] = 1.0
        for ch in _answer_row_channels(lay):
            w_in1[kk, ch] = 1.0
        b_in1[kk] = -1.0
        w_out1[lay.QKA + kk, kk] = 1.0
    layers = [LayerWeights(wq, wk, wv, wo, w_in1, b_in1, w_out1)]

    # ---- layers 2..L: binding lookup, identical
    S = MARGIN
    c_one = PLANTED_ROTARY + nk
    c_null = c_one + 1
    n_lookup = L - 1
    wq, wk, wv, wo = (np.zeros((d, d)) for _ in range(4))
    for h in range(H):
        o = h % (D + 2)
        for kk in range(nk):
            # answer rows match the question key; trace rows match any key
            wq[hd(h, PLANTED_ROTARY + kk), lay.QKA + kk] = S * sq
            wq[hd(h, PLANTED_ROTARY + kk), lay.ONE] = 2 * S * sq
            for ch in _answer_row_channels(lay):
                wq[hd(h, PLANTED_ROTARY + kk), ch] = -2 * S * sq
        wq[hd(h, c_one), lay.ONE] = S * sq
        wq[hd(h, c_null), lay.ONE] = 3 * S * sq
        for ch in _answer_row_channels(lay):
            wq[hd(h, c_null), ch] = -3 * S * sq
        wk[hd(h, c_null), v.QUESTION] = 1.0
        for kk in range(nk):
            if o == 0:
                wk[hd(h, PLANTED_ROTARY + kk), v.key(kk)] = 1.0
            else:
                wk[hd(h, PLANTED_ROTARY + kk), lay.p_key(o, kk)] = 1.0
        if o == 0:
            wk[hd(h, c_one), lay.p(1, v.QUESTION)] = -1.0
        elif o == 1:
            wk[hd(h, c_one), v.VAL] = 1.0
        else:
            wk[hd(h, c_one), lay.p(o - 1, v.VAL)] = 1.0
        if o >= 2 and h < D + 2:
            j = o - 2
            for dig in range(10):
                wv[hd(h, dig), v.digit(dig)] = 1.0
                wo[lay.O[j] + dig, hd(h, dig)] = 1.0 / n_lookup
    for _ in range(n_lookup):
        layers.append(LayerWeights(wq, wk, wv, wo))

    # ---- final MLP: answer readout and critical flag
    m = c.mlp_dim
    w_in = np.zeros((m, d))
    b_in = np.zeros(m)
    w_out = np.zeros((d, m))
    u = 0

    def index_channel(j: int) -> int:
        return v.THINK_CLOSE if j == 0 else lay.p(j, v.THINK_CLOSE)

    for j in range(D):
        for dig in range(10):
            w_in[u, lay.O[j] + dig] = 1.0
            w_in[u, index_channel(j)] = 1.0
            b_in[u] = -1.5
            w_out[lay.OUT + dig, u] = 2.0
            u += 1
    w_in[u, index_channel(D)] = 1.0
    w_out[lay.END, u] = 1.0
    u += 1
    for kk in range(nk):
        # binding key equal to the question key (not the question's own copy)
        w_in[u, v.key(kk)] = 1.0
        w_in[u, lay.QK + kk] = 1.0
        w_in[u, lay.p(1, v.QUESTION)] = -1.0
        b_in[u] = -1.0
        w_out[lay.CRIT, u] = 1.0
        u += 1
        # VAL right after it
        w_in[u, lay.p_key(1, kk)] = 1.0
        w_in[u, lay.QK + kk] = 1.0
        w_in[u, v.VAL] = 1.0
        b_in[u] = -2.0
        w_out[lay.CRIT, u] = 1.0
        u += 1
        for j in range(D):
            w_in[u, lay.p_key(j + 2, kk)] = 1.0
            w_in[u, lay.QK + kk] = 1.0
            w_in[u, lay.p(j + 1, v.VAL)] = 1.0
            b_in[u] = -2.0
            w_out[lay.CRIT, u] = 1.0
            u += 1
    last = layers[-1]
    layers[-1] = LayerWeights(last.wq, last.wk, last.wv, last.wo, w_in, b_in, w_out)

    unembed = np.zeros((v.size, d))
    for dig in range(10):
        unembed[v.digit(dig), lay.OUT + dig] = 10.0
    unembed[v.ANSWER_END, lay.END] = 10.0
    model = Model(c, embed, layers, unembed, "planted")
    model.layout = lay  # type: ignore[attr-defined]
    return model


# ---------------------------------------------------------------------------
# decoding


@dataclass
class DecodeResult:
    tokens: List[int]  # generated (including forced) tokens, in order
    record: Optional[AttentionRecord]
    hiddens: List[np.ndarray]
    cache_lengths: List[int]  # effective length after each processed step
    pre_lengths: List[int]  # effective length before eviction at each step
    events: List[EvictionEvent]
    prompt_len: int = 0

    def answer(self, close_token: int = Vocab.THINK_CLOSE, end_token: int = Vocab.ANSWER_END) -> List[int]:
        if close_token not in self.tokens:
            return []
        out = self.tokens[self.tokens.index(close_token) + 1:]
        return out[:-1] if out and out[-1] == end_token else out


def _entry(out: StepOutput, token: int, position: int) -> CacheEntry:
    return CacheEntry(position, token, out.keys, out.values)


def decode(model: Model, prompt: Sequence[int], policy: Optional[CachePolicy] = None,
           max_steps: int = 64, record_attention: bool = False, forced: Sequence[int] = (),
           counter: Optional[FlopCounter] = None) -> DecodeResult:
    """Greedy decoding through a cache policy.

    ``forced`` tokens are fed instead of the argmax for the first steps (the
    thinking trace under teacher forcing); free generation follows and stops
    at ANSWER_END or after ``max_steps`` generated tokens.
    """
    if max_steps < 1:
        raise ModelError("max_steps must be >= 1")
    if not prompt:
        raise ModelError("prompt must be non-empty")
    policy = FullCache() if policy is None else policy
    record = AttentionRecord() if record_attention else None
    c = model.config

    prefill: List[CacheEntry] = []
    view = CacheView.from_entries([], c.n_layers, c.d_model)
    out = None
    for pos, tok in enumerate(prompt):
        out = forward_step(model, view, tok, pos, counter)
        prefill.append(_entry(out, tok, pos))
        view = CacheView(
            np.append(view.positions, pos),
            np.append(view.tokens, tok),
            np.concatenate([view.keys, out.keys[None]]),
            np.concatenate([view.values, out.values[None]]),
        )
        if record is not None:
            record.steps.append(StepAttention(pos, tok, out.positions, out.attention))
    policy.init(prefill)

    tokens: List[int] = []
    hiddens: List[np.ndarray] = []
    lengths: List[int] = []
    pre: List[int] = []
    pos = len(prompt)
    for step in range(max_steps):
        tok = int(forced[step]) if step < len(forced) else int(np.argmax(out.logits))
        tokens.append(tok)
        if tok == Vocab.ANSWER_END and step >= len(forced):
            break
        if step == max_steps - 1:
            break
        if pos >= c.max_pos:
            raise ModelError(f"decode ran past max_pos={c.max_pos}")
        before = counter.flops if counter is not None else 0
        out = forward_step(model, policy.view(), tok, pos, counter)
        if counter is not None:
            counter.end_step(before)
        if record is not None:
            record.steps.append(StepAttention(pos, tok, out.positions, out.attention))
        hiddens.append(out.hidden)
        policy.on_step(_entry(out, tok, pos), out)
        pre.append(policy.last_pre_len)
        lengths.append(policy.total)
        pos += 1
    return DecodeResult(tokens, record, hiddens, lengths, pre, list(policy.events), len(prompt))


def decode_instance(model: Model, inst: Instance, policy: Optional[CachePolicy] = None,
                    record_attention: bool = False, counter: Optional[FlopCounter] = None) -> DecodeResult:
    """Question as prompt, THINK_OPEN + trace + THINK_CLOSE forced, answer generated."""
    forced = [Vocab.THINK_OPEN] + list(inst.trace) + [Vocab.THINK_CLOSE]
    return decode(model, inst.question, policy, max_steps=len(forced) + len(inst.answer) + 1,
                  record_attention=record_attention, forced=forced, counter=counter)


def teacher_forced_trace(model: Model, sequence: Sequence[int]) -> Tuple[AttentionRecord, List[np.ndarray]]:
    """Run the exact token sequence with a full cache, recording every step."""
    record, hiddens, _ = teacher_forced_cache(model, sequence)
    return record, hiddens


def teacher_forced_cache(model: Model, sequence: Sequence[int]):
    """Like ``teacher_forced_trace`` but also returns the cache entries."""
    c = model.config
    if len(sequence) > c.max_pos:
        raise ModelError(f"sequence of length {len(sequence)} exceeds max_pos={c.max_pos}")
    record = AttentionRecord()
    hiddens: List[np.ndarray] = []
    cache = FullCache().init([])
    for pos, tok in enumerate(sequence):
        out = forward_step(model, cache.view(), int(tok), pos)
        record.steps.append(StepAttention(pos, int(tok), out.positions, out.attention))
        hiddens.append(out.hidden)
        cache.append(_entry(out, int(tok), pos), 0.0)
    return record, hiddens, cache.entries
