"""Flat, fully-defaulted run configuration."""
from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .data import PRESETS
from .kd import KL_STUDENT_TARGET, KL_TEACHER_TARGET, KDConfig, default_tau
from .model import ModelConfig

# fields that do not change the trajectory and stay out of the config hash;
# rounds is excluded so an interrupted run can be extended by resuming it
NON_SEMANTIC = frozenset({"output_dir", "workers", "cache_dir", "save_traces", "rounds"})


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    preset: str = "noniid_unbalanced"
    strategy: Literal["fedavg", "fedkd", "fedselectkd"] = "fedselectkd"
    seed: int = 0
    rounds: int = Field(15, ge=0)
    participation: float = Field(1.0, gt=0.0, le=1.0)
    eval_every: int = Field(1, ge=1)
    scale: float = Field(0.1, gt=0.0)
    skew: float = Field(0.9, ge=0.0, le=1.0)

    # selective distillation
    lam: float = Field(0.2, ge=0.0, le=1.0)
    tau: Optional[float] = Field(None, ge=0.0)  # None -> 0.3 ln|V|
    epochs: int = Field(1, ge=1)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(2e-3, gt=0.0)
    weight_decay: float = Field(0.01, ge=0.0)
    kl_direction: Literal["teacher_target", "student_target"] = KL_TEACHER_TARGET
    reset_local_each_round: bool = False

    # model
    vocab_size: int = Field(96, ge=16)
    content_fraction: float = Field(0.7, gt=0.0, lt=1.0)
    model_dim: int = 64
    bottleneck_dim: int = 16
    n_encoder_layers: int = Field(2, ge=1)
    n_decoder_layers: int = Field(4, ge=1)
    n_heads: int = 4
    ffn_dim: int = 128
    adapter_layers: Optional[list[int]] = None  # None -> top half of the decoder
    max_src_len: int = 40
    max_tgt_len: int = 12

    # backbone pretraining
    backbone_seed: int = 0
    pretrain_steps: int = Field(4000, ge=0)
    pretrain_corpus: int = Field(16000, ge=1)
    pretrain_lr: float = Field(2e-3, gt=0.0)

    # plumbing
    save_traces: bool = True
    workers: int = Field(1, ge=1)
    output_dir: str = "runs/default"
    cache_dir: Optional[str] = None

    @field_validator("preset")
    @classmethod
    def _known_preset(cls, v: str) -> str:
        if v not in PRESETS:
            raise ValueError(f"unknown preset {v!r}; expected one of {', '.join(PRESETS)}")
        return v

    @model_validator(mode="after")
    def _resolve(self) -> "RunConfig":
        self.model()  # raises on inconsistent model dimensions
        if self.tau is None:
            object.__setattr__(self, "tau", default_tau(self.vocab_size))
        if self.adapter_layers is None:
            object.__setattr__(self, "adapter_layers", list(self.model().adapter_layers))
        return self

    def model(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.vocab_size, model_dim=self.model_dim, bottleneck_dim=self.bottleneck_dim,
            n_encoder_layers=self.n_encoder_layers, n_decoder_layers=self.n_decoder_layers,
            n_heads=self.n_heads, ffn_dim=self.ffn_dim,
            adapter_layers=tuple(self.adapter_layers) if self.adapter_layers is not None else None,
            max_src_len=self.max_src_len, max_tgt_len=self.max_tgt_len)

    def kd(self) -> KDConfig:
        tau = self.tau if self.tau is not None else default_tau(self.vocab_size)
        return KDConfig(lam=self.lam, tau=tau, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                        weight_decay=self.weight_decay, kl_direction=self.kl_direction)

    def semantic(self) -> dict:
        d = self.model_dump()
        return {k: v for k, v in d.items() if k not in NON_SEMANTIC}

    def config_hash(self) -> bytes:
        blob = json.dumps(self.semantic(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()

    def backbone_key(self) -> str:
        keys = ("vocab_size", "content_fraction", "model_dim", "bottleneck_dim", "n_encoder_layers",
                "n_decoder_layers", "n_heads", "ffn_dim", "adapter_layers", "max_src_len", "max_tgt_len",
                "backbone_seed", "pretrain_steps", "pretrain_corpus", "pretrain_lr")
        d = self.model_dump()
        blob = json.dumps({k: d[k] for k in keys}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:20]

    def dump_json(self) -> str:
        d = self.model_dump()
        if d["tau"] is not None and math.isinf(d["tau"]):
            d["tau"] = "inf"
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "RunConfig":
        data = json.loads(Path(path).read_text()) if path else {}
        if data.get("tau") == "inf":
            data["tau"] = math.inf
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)


__all__ = ["RunConfig", "KL_STUDENT_TARGET", "KL_TEACHER_TARGET"]
