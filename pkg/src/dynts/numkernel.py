"""Dense float64 kernels: row softmax, rotary positions, the 3-layer MLP and its
exact backward pass, and a central finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Dict, Iterator, Tuple

import numpy as np
from scipy.special import erf

ROPE_BASE = 10000.0
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    pass


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise ShapeError(f"{what}: non-finite values in input")


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction. Accepts 1-D (one row) or 2-D input."""
    m = np.asarray(m, dtype=np.float64)
    _check_finite(m, "softmax_rows")
    if m.ndim not in (1, 2) or m.shape[-1] == 0:
        raise ShapeError(f"softmax_rows: expected non-empty 1-D/2-D input, got shape {m.shape}")
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def rope_frequencies(dim: int, base: float = ROPE_BASE) -> np.ndarray:
    if dim % 2:
        raise ShapeError(f"rotary dimension must be even, got {dim}")
    return base ** (-2.0 * np.arange(dim // 2) / dim)


def rotary_apply(v: np.ndarray, position: int, base: float = ROPE_BASE) -> np.ndarray:
    """Rotate adjacent coordinate pairs (2j, 2j+1) by position * base**(-2j/len(v))."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] % 2:
        raise ShapeError(f"rotary_apply needs an even-length vector, got shape {v.shape}")
    if position < 0:
        raise ShapeError("rotary_apply: position must be >= 0")
    ang = position * rope_frequencies(v.shape[0], base)
    return _rotate_pairs(v, np.cos(ang), np.sin(ang))


def _rotate_pairs(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def rotary_heads(x: np.ndarray, position: int, rotary_dim: int, base: float = ROPE_BASE) -> np.ndarray:
    """Apply rotary to the leading ``rotary_dim`` coordinates of every head.

    ``x`` has shape (n_heads, d_head). With rotary_dim == d_head this is
    ``rotary_apply`` on each head row.
    """
    if rotary_dim == 0:
        return x
    ang = position * rope_frequencies(rotary_dim, base)
    out = x.copy()
    out[:, :rotary_dim] = _rotate_pairs(x[:, :rotary_dim], np.cos(ang), np.sin(ang))
    return out


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


@dataclass
class MlpParams:
    """Weights of the d -> m1 -> m2 -> 1 regression head (GELU on hidden layers)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def __post_init__(self) -> None:
        m1, d = self.w1.shape
        m2, m1b = self.w2.shape
        m3, m2b = self.w3.shape
        if m1b != m1 or m2b != m2 or m3 != 1:
            raise ShapeError(
                f"inconsistent MLP shape chain: w1 {self.w1.shape}, w2 {self.w2.shape}, w3 {self.w3.shape}"
            )
        if self.b1.shape != (m1,) or self.b2.shape != (m2,) or self.b3.shape != (1,):
            raise ShapeError("bias shapes do not match weight shapes")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.w1.shape[1], self.w1.shape[0], self.w2.shape[0]

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    def as_dict(self) -> Dict[str, np.ndarray]:
        return dict(self.items())

    def copy(self) -> "MlpParams":
        return MlpParams(**{k: v.copy() for k, v in self.items()})

    @classmethod
    def zeros(cls, d: int, m1: int | None = None, m2: int | None = None) -> "MlpParams":
        m1 = 2 * d if m1 is None else m1
        m2 = d // 2 if m2 is None else m2
        return cls(
            w1=np.zeros((m1, d)), b1=np.zeros(m1),
            w2=np.zeros((m2, m1)), b2=np.zeros(m2),
            w3=np.zeros((1, m2)), b3=np.zeros(1),
        )

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, m1: int | None = None, m2: int | None = None) -> "MlpParams":
        if d < 2 or d % 2:
            raise ShapeError(f"MLP input dim must be even and >= 2, got {d}")
        m1 = 2 * d if m1 is None else m1
        m2 = d // 2 if m2 is None else m2
        return cls(
            w1=rng.normal(0.0, 1.0 / np.sqrt(d), (m1, d)), b1=np.zeros(m1),
            w2=rng.normal(0.0, 1.0 / np.sqrt(m1), (m2, m1)), b2=np.zeros(m2),
            w3=rng.normal(0.0, 1.0 / np.sqrt(m2), (1, m2)), b3=np.zeros(1),
        )


@dataclass
class MlpActivations:
    params_id: int
    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray


def mlp_forward(params: MlpParams, x: np.ndarray) -> Tuple[np.ndarray, MlpActivations]:
    """Score one input (shape (d,)) or a batch (shape (n, d)).

    Returns a scalar array for a single input, shape (n,) for a batch.
    """
    x = np.asarray(x, dtype=np.float64)
    d = params.w1.shape[1]
    if x.shape[-1] != d or x.ndim not in (1, 2):
        raise ShapeError(f"mlp_forward: input shape {x.shape} does not match d={d}")
    z1 = x @ params.w1.T + params.b1
    a1 = gelu(z1)
    z2 = a1 @ params.w2.T + params.b2
    a2 = gelu(z2)
    score = (a2 @ params.w3.T)[..., 0] + params.b3[0]
    return score, MlpActivations(id(params), x, z1, a1, z2, a2)


def mlp_backward(
    params: MlpParams, acts: MlpActivations, upstream
) -> Tuple[MlpParams, np.ndarray]:
    """Reverse-mode gradients of sum(upstream * score) w.r.t. params and input.

    Batch gradients are summed over the batch.
    """
    if acts.params_id != id(params):
        raise ShapeError("mlp_backward: activation cache was produced by different params")
    g = np.asarray(upstream, dtype=np.float64)
    batched = acts.x.ndim == 2
    if batched:
        g = np.broadcast_to(g, acts.x.shape[:1]).reshape(-1, 1)
    else:
        if g.ndim != 0:
            raise ShapeError("mlp_backward: single-sample forward needs a scalar upstream")
        g = g.reshape(1)
    a2, z2, a1, z1, x = acts.a2, acts.z2, acts.a1, acts.z1, acts.x

    if batched:
        gw3 = g.T @ a2
        gb3 = g.sum(axis=0)
        ga2 = g @ params.w3
        gz2 = ga2 * gelu_grad(z2)
        gw2 = gz2.T @ a1
        gb2 = gz2.sum(axis=0)
        ga1 = gz2 @ params.w2
        gz1 = ga1 * gelu_grad(z1)
        gw1 = gz1.T @ x
        gb1 = gz1.sum(axis=0)
        gx = gz1 @ params.w1
    else:
        gw3 = np.outer(g, a2)
        gb3 = g.copy()
        ga2 = g[0] * params.w3[0]
        gz2 = ga2 * gelu_grad(z2)
        gw2 = np.outer(gz2, a1)
        gb2 = gz2
        ga1 = params.w2.T @ gz2
        gz1 = ga1 * gelu_grad(z1)
        gw1 = np.outer(gz1, x)
        gb1 = gz1
        gx = params.w1.T @ gz1
    grads = MlpParams(w1=gw1, b1=gb1, w2=gw2, b2=gb2, w3=gw3, b3=np.asarray(gb3).reshape(1))
    return grads, gx


def finite_diff_check(
    f: Callable[[MlpParams], float],
    params: MlpParams,
    analytic: MlpParams,
    eps: float = 1e-3,
    max_per_array: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max of |g_analytic - g_fd| / max(1, |g_fd|) with central differences.

    Every coordinate is probed unless ``max_per_array`` caps it, in which case
    a seeded random subset of each tensor is checked.
    """
    worst = 0.0
    probe = params.copy()
    rng = np.random.default_rng(0) if rng is None else rng
    for name, arr in probe.items():
        ga = getattr(analytic, name)
        flat = arr.reshape(-1)
        gflat = ga.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_array is not None and flat.size > max_per_array:
            idx = rng.choice(flat.size, size=max_per_array, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(probe)
            flat[i] = orig - eps
            fm = f(probe)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ShapeError(f"finite_diff_check: f is non-finite near {name}[{i}]")
            gfd = (fp - fm) / (2.0 * eps)
            worst = max(worst, abs(gflat[i] - gfd) / max(1.0, abs(gfd)))
    return worst
