"""Importance predictor: a d -> 2d -> d/2 -> 1 MLP regressed onto importance labels.

Training uses per-token MSE, AdamW with decoupled weight decay, global-norm
gradient clipping and a cosine learning-rate decay to zero. Gradients are
accumulated over micro-batches up to the global batch.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import kendalltau

from .importance import select_count, top_indices
from .numkernel import MlpParams, ShapeError, mlp_backward, mlp_forward

OVERLAP_GRID = (20, 30, 40, 50, 60, 70, 80, 90)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 15
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    global_batch: int = 256
    micro_batch: int = 64
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr < 0 or self.weight_decay < 0 or self.clip_norm <= 0:
            raise ValueError("lr and weight_decay must be >= 0, clip_norm > 0")
        if self.global_batch < 1 or self.micro_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")


@dataclass
class TraceSamples:
    """Think-token hidden states and labels of one trace."""

    trace_id: int
    hidden: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,)

    def __post_init__(self) -> None:
        if self.hidden.ndim != 2 or self.hidden.shape[0] != self.labels.shape[0]:
            raise ShapeError("hidden states and labels disagree in length")
        if np.any(self.labels < 0):
            raise ValueError("labels must be >= 0")


def predict(params: MlpParams, h: np.ndarray):
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != params.dims[0]:
        raise ShapeError(f"hidden size {h.shape[-1]} does not match predictor input {params.dims[0]}")
    score, _ = mlp_forward(params, h)
    return float(score) if score.ndim == 0 else score


def kendall_tau(a: Sequence[float], b: Sequence[float]) -> float:
    """Tie-corrected Kendall tau-b. Returns 0.0 when either input is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("kendall_tau needs two 1-D arrays of equal length")
    if a.size < 2:
        raise ValueError("kendall_tau needs at least 2 items")
    if np.all(a == a[0]) or np.all(b == b[0]):
        return 0.0
    return float(kendalltau(a, b, variant="b").statistic)


def overlap_rate(gt: Sequence[float], pred: Sequence[float], gt_p: float = 20, pred_p: float = 30) -> float:
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise ValueError("overlap_rate needs equal-length inputs")
    g = set(top_indices(gt, select_count(gt_p, gt.size)).tolist())
    p = set(top_indices(pred, select_count(pred_p, pred.size)).tolist())
    return len(g & p) / len(g)


def split_traces(traces: Sequence[TraceSamples], val_fraction: float = 0.1, seed: int = 0):
    """Deterministic held-out split by trace id."""
    ids = sorted(t.trace_id for t in traces)
    perm = np.random.default_rng([seed, 0x5B17]).permutation(len(ids))
    n_val = max(1, int(round(val_fraction * len(ids))))
    val_ids = {ids[i] for i in perm[:n_val]}
    train = [t for t in traces if t.trace_id not in val_ids]
    val = [t for t in traces if t.trace_id in val_ids]
    if not train or not val:
        raise TrainingError(
            f"empty split: {len(train)} train / {len(val)} validation traces from {len(ids)}"
        )
    return train, val


def evaluate(params: MlpParams, traces: Sequence[TraceSamples]) -> Dict[str, float]:
    sq, n = 0.0, 0
    taus: List[float] = []
    ov = {p: [] for p in OVERLAP_GRID}
    for t in traces:
        pred = predict(params, t.hidden)
        sq += float(np.sum((pred - t.labels) ** 2))
        n += t.labels.size
        if t.labels.size >= 2:
            taus.append(kendall_tau(t.labels, pred))
        for p in OVERLAP_GRID:
            ov[p].append(overlap_rate(t.labels, pred, 20, p))
    out = {"mse": sq / max(n, 1), "kendall": float(np.mean(taus)) if taus else 0.0}
    for p in OVERLAP_GRID:
        out[f"overlap_20_in_{p}"] = float(np.mean(ov[p]))
    return out


@dataclass
class History:
    rows: List[Dict[str, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def last(self) -> Dict[str, float]:
        return self.rows[-1]

    def column(self, key: str) -> List[float]:
        return [r[key] for r in self.rows]

    def to_csv(self) -> str:
        if not self.rows:
            return "epoch,train_mse,val_mse,kendall\n"
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(self.rows[0].keys()), lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()


def _global_norm(g: MlpParams) -> float:
    return math.sqrt(sum(float(np.sum(a * a)) for _, a in g.items()))


def train(traces: Sequence[TraceSamples], config: TrainConfig = TrainConfig(),
          init: Optional[MlpParams] = None) -> Tuple[MlpParams, History]:
    if not traces:
        raise TrainingError("no traces to train on")
    train_set, val_set = split_traces(traces, config.val_fraction, config.seed)
    X = np.concatenate([t.hidden for t in train_set])
    Y = np.concatenate([t.labels for t in train_set])
    d = X.shape[1]
    rng = np.random.default_rng([config.seed, 0x7A1])
    params = MlpParams.init(d, rng) if init is None else init.copy()
    m = {k: np.zeros_like(a) for k, a in params.items()}
    v = {k: np.zeros_like(a) for k, a in params.items()}
    n = X.shape[0]
    steps_per_epoch = math.ceil(n / config.global_batch)
    total = max(1, config.epochs * steps_per_epoch)
    hist = History()
    t = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for s in range(steps_per_epoch):
            batch = order[s * config.global_batch:(s + 1) * config.global_batch]
            grads = None
            for mb in range(0, batch.size, config.micro_batch):
                idx = batch[mb:mb + config.micro_batch]
                score, acts = mlp_forward(params, X[idx])
                up = 2.0 * (score - Y[idx]) / batch.size
                g, _ = mlp_backward(params, acts, up)
                if grads is None:
                    grads = g
                else:
                    for k, a in g.items():
                        getattr(grads, k).__iadd__(a)
            norm = _global_norm(grads)
            if not math.isfinite(norm):
                raise TrainingError(f"non-finite gradient in epoch {epoch}; last good epoch {epoch - 1}")
            clip = min(1.0, config.clip_norm / (norm + 1e-12))
            lr = config.lr * 0.5 * (1.0 + math.cos(math.pi * t / total))
            t += 1
            b1, b2 = config.beta1, config.beta2
            for k, p in params.items():
                g = getattr(grads, k) * clip
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                mh = m[k] / (1 - b1 ** t)
                vh = v[k] / (1 - b2 ** t)
                p -= lr * (mh / (np.sqrt(vh) + config.adam_eps) + config.weight_decay * p)
        tr = float(np.mean((predict(params, X) - Y) ** 2))
        if not math.isfinite(tr):
            raise TrainingError(f"loss became NaN in epoch {epoch}; last good epoch {epoch - 1}")
        ev = evaluate(params, val_set)
        row = {"epoch": epoch, "train_mse": tr, "val_mse": ev.pop("mse"), "lr": lr}
        row.update(ev)
        hist.rows.append(row)
    return params, hist


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: MlpParams, path, config: Optional[TrainConfig] = None, extra: Optional[dict] = None) -> None:
    obj = {
        "format": "dynts-predictor-v1",
        "dims": list(params.dims),
        "config": asdict(config) if config is not None else None,
        "extra": extra or {},
        "arrays": {k: {"shape": list(a.shape), "data": a.reshape(-1).tolist()} for k, a in params.items()},
    }
    Path(path).write_text(json.dumps(obj))


def load_checkpoint(path) -> MlpParams:
    obj = json.loads(Path(path).read_text())
    if obj.get("format") != "dynts-predictor-v1":
        raise ValueError(f"{path}: not a predictor checkpoint")
    arrays = {
        k: np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        for k, spec in obj["arrays"].items()
    }
    return MlpParams(**arrays)
