"""Server loop: client sampling, broadcast, local training, FedAvg and the byte ledger.

Clients never expose instances to the server or to each other.  The only
things crossing the client boundary are packed adapter ParamSets (float32
wire bytes) and scalar metrics.
"""
from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor
from .data import ClientData
from .kd import KDConfig, TokenTrace, target_classes, train_epoch
from .metrics import evaluate_client, teacher_forced_ce
from .model import ModelConfig, Summarizer, adapter_names, init_adapters
from .optim import AdamWState
from .seeding import rng as make_rng

log = logging.getLogger(__name__)

WIRE_DTYPE = np.dtype("<f4")
Arrays = dict  # name -> np.ndarray (server-side / wire form of a ParamSet)


class Strategy(str, Enum):
    FEDAVG = "fedavg"
    FEDKD = "fedkd"
    FEDSELECTKD = "fedselectkd"


class AggregationError(ValueError):
    pass


class RoundError(RuntimeError):
    pass


# ---------------------------------------------------------------- wire format

def pack_params(params: Mapping[str, np.ndarray | Tensor]) -> bytes:
    """Concatenated little-endian float32 values in sorted-name order (no header)."""
    parts = []
    for name in sorted(params):
        v = params[name]
        v = v.data if isinstance(v, Tensor) else v
        parts.append(np.ascontiguousarray(v, dtype=WIRE_DTYPE).tobytes())
    return b"".join(parts)


def unpack_params(payload: bytes, shapes: Mapping[str, tuple[int, ...]]) -> Arrays:
    expected = sum(math.prod(s) for s in shapes.values()) * WIRE_DTYPE.itemsize
    if len(payload) != expected:
        raise ValueError(f"payload has {len(payload)} bytes, expected {expected}")
    flat = np.frombuffer(payload, dtype=WIRE_DTYPE).astype(np.float64)
    out, offset = {}, 0
    for name in sorted(shapes):
        size = math.prod(shapes[name])
        out[name] = flat[offset:offset + size].reshape(shapes[name]).copy()
        offset += size
    return out


def checksum(params: Mapping[str, np.ndarray]) -> str:
    return hashlib.sha256(pack_params(params)).hexdigest()[:16]


# ---------------------------------------------------------------- server ops

def init_server(cfg: ModelConfig, seed: int) -> Arrays:
    return {k: v.data for k, v in init_adapters(cfg, seed).items()}


def aggregate(updates: Sequence[tuple[Mapping[str, np.ndarray], int]]) -> Arrays:
    """Dataset-size weighted average over the participants of one round."""
    if not updates:
        raise AggregationError("no updates to aggregate")
    ref = updates[0][0]
    for params, _ in updates[1:]:
        for name in sorted(set(ref) | set(params)):
            if name not in ref or name not in params:
                raise AggregationError(f"ParamSets differ at tensor {name!r} (missing)")
            if np.shape(ref[name]) != np.shape(params[name]):
                raise AggregationError(
                    f"ParamSets differ at tensor {name!r}: {np.shape(ref[name])} vs {np.shape(params[name])}")
    total = sum(n for _, n in updates)
    if total <= 0:
        raise AggregationError("participant dataset sizes sum to zero")
    out = {}
    for name in sorted(ref):
        acc = np.zeros_like(np.asarray(ref[name], dtype=np.float64))
        for params, n in updates:
            acc = acc + (n / total) * np.asarray(params[name], dtype=np.float64)
        out[name] = acc
    return out


def sample_clients(clients: Sequence, rate: float, rng: np.random.Generator) -> list:
    """``max(1, round(rate * |C|))`` clients without replacement, returned in registry order."""
    if not clients:
        raise ValueError("no clients registered")
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"participation rate must lie in (0, 1], got {rate}")
    k = max(1, int(round(rate * len(clients))))
    if k >= len(clients):
        return list(clients)
    picked = sorted(rng.choice(len(clients), size=k, replace=False).tolist())
    return [clients[i] for i in picked]


# ---------------------------------------------------------------- clients

@dataclass
class ClientResult:
    cid: str
    payload: bytes
    n_train: int
    train_loss: float
    traces: list[TokenTrace]


class ClientState:
    """One silo: private data, persistent local adapter, per-round global adapter."""

    def __init__(self, cid: str, data: ClientData, model: Summarizer, seed: int):
        self.cid = cid
        self.domain = data.domain
        self.seed = seed
        self._data = data
        self._model = model
        self.local: dict[str, Tensor] | None = None
        self.global_params: dict[str, Tensor] | None = None
        self._train = model.prepare(data.train) if data.train else None
        self._train_classes = (target_classes(self._train, [i.classes for i in data.train])
                               if self._train is not None else None)
        self._valid = model.prepare(data.valid) if data.valid else None

    @property
    def n_train(self) -> int:
        return len(self._data.train)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return self._data.sizes()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        cfg = self._model.cfg
        n, m = cfg.model_dim, cfg.bottleneck_dim
        shp = {"W_down": (n, m), "W_up": (m, n), "ln_gain": (n,), "ln_bias": (n,)}
        return {name: shp[name.split(".")[1]] for name in adapter_names(cfg)}

    def receive(self, payload: bytes, overwrite_local: bool) -> None:
        arrays = unpack_params(payload, self.shapes())
        self.global_params = {k: Tensor(v) for k, v in arrays.items()}
        if overwrite_local or self.local is None:
            self.local = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}

    def train(self, kd: KDConfig, round_idx: int, collect: bool = True) -> ClientResult:
        if self._train is None or self.n_train == 0:
            raise RoundError(f"client {self.cid!r} has an empty training split")
        opt = AdamWState(lr=kd.lr, weight_decay=kd.weight_decay)
        traces: list[TokenTrace] = []
        losses = []
        for epoch in range(kd.epochs):
            r = make_rng(self.seed, "shuffle", self.cid, round_idx, epoch)
            tr, loss = train_epoch(self._model, self._train, self._train_classes, self.local,
                                   self.global_params, kd, opt, r, collect)
            traces += tr
            losses.append(loss)
        return ClientResult(self.cid, pack_params(self.local), self.n_train, float(np.mean(losses)), traces)

    def valid_ce(self) -> float:
        if self._valid is None:
            return float("nan")
        return teacher_forced_ce(self._model, self.local, self._data.valid, self._valid)

    def snapshot_local(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.local.items()}

    def evaluate(self, params: Mapping[str, np.ndarray]):
        return evaluate_client(self._model, {k: Tensor(v) for k, v in params.items()}, self._data.test)


# ---------------------------------------------------------------- rounds

@dataclass
class RoundRecord:
    round: int
    participants: list[str]
    bytes_up: dict[str, int]
    bytes_down: dict[str, int]
    train_loss: dict[str, float]
    kd_fraction: dict[str, float]
    checksum: str
    traces: dict[str, list[TokenTrace]] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {"round": self.round, "participants": self.participants, "bytes_up": self.bytes_up,
                "bytes_down": self.bytes_down, "train_loss": self.train_loss,
                "kd_fraction": self.kd_fraction, "checksum": self.checksum}


def kd_for_strategy(strategy: Strategy, kd: KDConfig) -> KDConfig:
    if strategy is Strategy.FEDAVG:
        return KDConfig(**{**kd.__dict__, "distill": False})
    if strategy is Strategy.FEDKD:
        return KDConfig(**{**kd.__dict__, "tau": math.inf, "distill": True})
    return kd


def run_round(server: Arrays, clients: Sequence[ClientState], strategy: Strategy, kd: KDConfig,
              round_idx: int, rate: float = 1.0, seed: int = 0, reset_local_each_round: bool = False,
              workers: int = 1, collect: bool = True) -> tuple[Arrays, RoundRecord]:
    strategy = Strategy(strategy)
    participants = sample_clients(clients, rate, make_rng(seed, "sampling", round_idx))
    payload = pack_params(server)
    overwrite = strategy is Strategy.FEDAVG or reset_local_each_round
    for c in participants:
        c.receive(payload, overwrite_local=overwrite)
    local_kd = kd_for_strategy(strategy, kd)

    def work(c: ClientState) -> ClientResult:
        return c.train(local_kd, round_idx, collect)

    if workers > 1 and len(participants) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, participants))
    else:
        results = [work(c) for c in participants]

    shapes = participants[0].shapes()
    updates = [(unpack_params(r.payload, shapes), r.n_train) for r in results]
    new_server = aggregate(updates)
    record = RoundRecord(
        round=round_idx,
        participants=[r.cid for r in results],
        bytes_up={r.cid: len(r.payload) for r in results},
        bytes_down={c.cid: len(payload) for c in participants},
        train_loss={r.cid: r.train_loss for r in results},
        kd_fraction={r.cid: (sum(t.kd_applied for t in r.traces) / len(r.traces)) if r.traces else 0.0
                     for r in results},
        checksum=checksum(new_server),
        traces={r.cid: r.traces for r in results},
    )
    return new_server, record
