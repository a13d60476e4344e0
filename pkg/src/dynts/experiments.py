"""End-to-end runs shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .cachemgr import POLICIES, selection_split
from .importance import TraceAnalysis, analyze
from .numkernel import MlpParams
from .policy import make_policy
from .predictor import TraceSamples, TrainConfig, train
from .synthdata import Instance, TaskParams, gen_dataset
from .toymodel import FlopCounter, Model, build_planted_model, decode_instance, planted_config


@dataclass(frozen=True)
class BudgetConfig:
    budget: int = 40
    local_window: int = 6
    ratio: float = 0.25
    n_sink: int = 4

    def split(self, prefill: int):
        return selection_split(self.budget, prefill, self.local_window, self.ratio)


def samples_from(analyses: Sequence[TraceAnalysis]) -> List[TraceSamples]:
    return [TraceSamples(a.instance.seed, a.think_hiddens(), a.labels) for a in analyses]


def train_on_model(model: Model, instances: Sequence[Instance], config: TrainConfig = TrainConfig()):
    analyses = [analyze(model, inst) for inst in instances]
    params, hist = train(samples_from(analyses), config)
    return params, hist, analyses


@dataclass
class PolicyRun:
    policy: str
    correct: List[bool] = field(default_factory=list)
    events: List[int] = field(default_factory=list)
    errors: List[str] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.correct)) if self.correct else 0.0


def run_policies(model: Model, instances: Sequence[Instance], budget: BudgetConfig,
                 params: Optional[MlpParams] = None, policies: Sequence[str] = POLICIES,
                 seed: int = 0) -> Dict[str, PolicyRun]:
    runs = {p: PolicyRun(p) for p in policies}
    for n, inst in enumerate(instances):
        for name in policies:
            pol = make_policy(name, budget.budget, budget.local_window, budget.ratio,
                              len(inst.question), params=params, d_model=model.config.d_model,
                              n_sink=budget.n_sink, seed=seed * 1000003 + n)
            res = decode_instance(model, inst, pol)
            runs[name].correct.append(res.answer() == inst.answer)
            runs[name].events.append(len(res.events))
    return runs


def planted_pipeline(task: TaskParams = TaskParams(), n_train: int = 120, n_eval: int = 200,
                     budget: BudgetConfig = BudgetConfig(), train_cfg: TrainConfig = TrainConfig(),
                     n_layers: int = 12, eval_seed: int = 10_000):
    """Train the predictor on planted-model traces, then compare every policy."""
    model = build_planted_model(task, planted_config(task, n_layers=n_layers))
    train_set = gen_dataset(task, n_train, seed=0)
    params, hist, _ = train_on_model(model, train_set, train_cfg)
    evalset = gen_dataset(task, n_eval, seed=eval_seed)
    runs = run_policies(model, evalset, budget, params)
    return model, params, hist, runs


def instrumented_decode(model: Model, inst: Instance, policy) -> tuple:
    counter = FlopCounter()
    res = decode_instance(model, inst, policy, counter=counter)
    return res, counter
