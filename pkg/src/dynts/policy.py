"""DynTS policy: the dual-window cache scored online by the importance predictor.

Each think token is scored once, from the hidden state of the step that
processed it, and the score never changes afterwards. Question and answer
entries carry +inf.
"""

from __future__ import annotations

from typing import Optional

from .cachemgr import (
    ANSWER,
    CacheEntry,
    CacheError,
    CachePolicy,
    DualWindowCache,
    INF,
    make_baseline,
    selection_split,
)
from .numkernel import MlpParams
from .predictor import predict


class DyntsPolicy(DualWindowCache):
    name = "dynts"

    def __init__(self, params: MlpParams, budget: int, local_window: int, ratio: float,
                 d_model: Optional[int] = None, **kw):
        if d_model is not None and params.dims[0] != d_model:
            raise CacheError(
                f"predictor expects hidden size {params.dims[0]} but the model has d={d_model}"
            )
        super().__init__(budget=budget, local_window=local_window, ratio=ratio, **kw)
        self.params = params

    def score(self, entry: CacheEntry, step_output=None) -> float:
        if self._in_answer or entry.token == self.think_close:
            return INF
        if step_output is None:
            raise CacheError("dynts policy needs the step output (h_t) to score a think token")
        return predict(self.params, step_output.hidden)


def make_policy(name: str, budget: int, local_window: int, ratio: float, prefill_len: int,
                params: Optional[MlpParams] = None, d_model: Optional[int] = None,
                n_sink: int = 4, seed: int = 0) -> CachePolicy:
    """Any policy by name at an equal budget."""
    if name == "dynts":
        if params is None:
            raise CacheError("policy 'dynts' requires a predictor checkpoint")
        return DyntsPolicy(params, budget, local_window, ratio, d_model=d_model)
    return make_baseline(name, budget, local_window, ratio, prefill_len, n_sink=n_sink, seed=seed)


__all__ = ["DyntsPolicy", "make_policy", "selection_split", "ANSWER"]
