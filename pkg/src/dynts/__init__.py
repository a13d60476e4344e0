"""Thinking-token importance scoring and predictor-guided KV-cache selection."""

from .cachemgr import POLICIES, CacheEntry, CacheError, DualWindowCache, selection_split
from .costmodel import attn_flops, break_even_K, eviction_count, gain, predictor_flops
from .importance import analyze, importance_scores, retention_experiment, segment
from .numkernel import MlpParams, mlp_backward, mlp_forward
from .policy import DyntsPolicy, make_policy
from .predictor import TrainConfig, kendall_tau, overlap_rate, train
from .synthdata import Instance, TaskParams, gen_dataset
from .toymodel import ModelConfig, build_planted_model, build_scripted_model, decode, decode_instance

__version__ = "0.1.0"
