"""Federated adapter training for query-focused summarization with entropy-gated distillation.

Everything runs on a from-scratch numpy autodiff engine and a small synthetic
multi-domain corpus.
"""
from .config import RunConfig
from .federation import Strategy, aggregate, run_round
from .kd import KDConfig, default_tau, token_loss
from .model import ModelConfig, Summarizer, adapter_forward, payload_size
from .runner import compare, export_traces, load_backbone, run_training

__version__ = "0.1.0"

__all__ = ["RunConfig", "Strategy", "aggregate", "run_round", "KDConfig", "default_tau", "token_loss",
           "ModelConfig", "Summarizer", "adapter_forward", "payload_size", "compare", "export_traces",
           "load_backbone", "run_training"]
