"""Tiny post-LN transformer encoder-decoder with global/local bottleneck adapters.

The backbone is trained once on generic text and frozen.  Adapters sit after
selected decoder layers; the "global" and "local" adapter sets share the
backbone computation below the lowest adapted layer and diverge above it.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .data import BOS, EOS, PAD, Instance
from .optim import AdamWState, adamw_step
from .seeding import rng as make_rng

log = logging.getLogger(__name__)

ParamSet = dict  # name -> Tensor; adapter tensors only when exchanged
ADAPTER_KEYS = ("W_down", "W_up", "ln_gain", "ln_bias")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 96
    model_dim: int = 64
    bottleneck_dim: int = 16
    n_encoder_layers: int = 2
    n_decoder_layers: int = 4
    n_heads: int = 4
    ffn_dim: int = 128
    adapter_layers: tuple[int, ...] | None = None  # 1-based decoder layers; None -> top half
    max_src_len: int = 40
    max_tgt_len: int = 12

    def __post_init__(self):
        if self.adapter_layers is None:
            L = self.n_decoder_layers
            object.__setattr__(self, "adapter_layers", tuple(range(L - L // 2 + 1, L + 1)))
        else:
            object.__setattr__(self, "adapter_layers", tuple(sorted(int(i) for i in self.adapter_layers)))
        if not self.bottleneck_dim < self.model_dim:
            raise ValueError(f"bottleneck_dim {self.bottleneck_dim} must be < model_dim {self.model_dim}")
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        bad = [i for i in self.adapter_layers if not 1 <= i <= self.n_decoder_layers]
        if bad:
            raise ValueError(f"adapter layer {bad[0]} outside 1..{self.n_decoder_layers}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adapter_layers"] = list(self.adapter_layers)
        return d


def payload_count(n: int, m: int, n_layers: int) -> int:
    """Values in ``n_layers`` adapters of width n and bottleneck m: two projections plus the norm."""
    return n_layers * (2 * n * m + 2 * n)


def payload_size(cfg: ModelConfig) -> int:
    """Number of values in one exchanged adapter ParamSet."""
    return payload_count(cfg.model_dim, cfg.bottleneck_dim, len(cfg.adapter_layers))


# ---------------------------------------------------------------- parameters

def sinusoid(length: int, dim: int) -> np.ndarray:
    """Starting point for the learned position tables."""
    pos = np.arange(length)[:, None]
    freq = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
    out = np.zeros((length, dim))
    out[:, 0::2] = np.sin(pos * freq)
    out[:, 1::2] = np.cos(pos * freq)
    return out


def init_backbone(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    r = make_rng(seed, "backbone-init")
    n, f, V = cfg.model_dim, cfg.ffn_dim, cfg.vocab_size
    w: dict[str, np.ndarray] = {}

    def lin(name, fan_in, fan_out):
        w[name] = r.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

    def ln(prefix):
        w[prefix + ".g"] = np.ones(n)
        w[prefix + ".b"] = np.zeros(n)

    def attn(prefix):
        for k in ("q", "k", "v", "o"):
            lin(f"{prefix}.{k}", n, n)

    def ffn(prefix):
        lin(prefix + ".w1", n, f)
        w[prefix + ".b1"] = np.zeros(f)
        lin(prefix + ".w2", f, n)
        w[prefix + ".b2"] = np.zeros(n)

    w["emb.word"] = r.normal(0.0, 1.0, size=(V, n))
    w["enc.pos"] = sinusoid(cfg.max_src_len, n)
    w["dec.pos"] = sinusoid(cfg.max_tgt_len, n)
    for i in range(1, cfg.n_encoder_layers + 1):
        p = f"enc{i}"
        attn(p + ".self"); ln(p + ".ln1"); ffn(p + ".ffn"); ln(p + ".ln2")
    for i in range(1, cfg.n_decoder_layers + 1):
        p = f"dec{i}"
        attn(p + ".self"); ln(p + ".ln1"); attn(p + ".cross"); ln(p + ".ln2")
        ffn(p + ".ffn"); ln(p + ".ln3")
    lin("head", n, V)
    return {k: Tensor(v) for k, v in w.items()}


def init_adapters(cfg: ModelConfig, seed: int) -> ParamSet:
    """W_down, W_up ~ U(-1/sqrt(n), 1/sqrt(n)); unit gain, zero bias."""
    r = make_rng(seed, "adapter-init")
    n, m = cfg.model_dim, cfg.bottleneck_dim
    bound = 1.0 / np.sqrt(n)
    out: ParamSet = {}
    for layer in cfg.adapter_layers:
        out[f"adapter{layer}.W_down"] = Tensor(r.uniform(-bound, bound, size=(n, m)), requires_grad=True)
        out[f"adapter{layer}.W_up"] = Tensor(r.uniform(-bound, bound, size=(m, n)), requires_grad=True)
        out[f"adapter{layer}.ln_gain"] = Tensor(np.ones(n), requires_grad=True)
        out[f"adapter{layer}.ln_bias"] = Tensor(np.zeros(n), requires_grad=True)
    return out


def neutral_adapters(cfg: ModelConfig) -> ParamSet:
    """Zero projections with unit-gain norm: the adapter reduces to LayerNorm(y)."""
    n, m = cfg.model_dim, cfg.bottleneck_dim
    out: ParamSet = {}
    for layer in cfg.adapter_layers:
        out[f"adapter{layer}.W_down"] = Tensor(np.zeros((n, m)))
        out[f"adapter{layer}.W_up"] = Tensor(np.zeros((m, n)))
        out[f"adapter{layer}.ln_gain"] = Tensor(np.ones(n))
        out[f"adapter{layer}.ln_bias"] = Tensor(np.zeros(n))
    return out


def adapter_names(cfg: ModelConfig) -> list[str]:
    return [f"adapter{layer}.{k}" for layer in cfg.adapter_layers for k in ADAPTER_KEYS]


def check_paramset(cfg: ModelConfig, params: Mapping[str, Tensor]) -> None:
    for layer in cfg.adapter_layers:
        for k in ADAPTER_KEYS:
            if f"adapter{layer}.{k}" not in params:
                raise KeyError(f"ParamSet missing adapter for decoder layer {layer} ({k})")


def clone_params(params: Mapping[str, Tensor], requires_grad: bool = True) -> ParamSet:
    return {k: Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in params.items()}


# ---------------------------------------------------------------- building blocks

def adapter_forward(y: Tensor, W_down: Tensor, W_up: Tensor, ln_gain: Tensor, ln_bias: Tensor) -> Tensor:
    """LayerNorm(y + ReLU(y W_down) W_up)."""
    return ad.layer_norm(y + ad.relu(y @ W_down) @ W_up, ln_gain, ln_bias)


def _attention(xq: Tensor, xkv: Tensor, w: Mapping[str, Tensor], prefix: str, mask: np.ndarray,
               n_heads: int) -> Tensor:
    B, Tq, n = xq.shape
    Tk = xkv.shape[1]
    d = n // n_heads

    def heads(t, T):
        return ad.transpose(ad.reshape(t, (B, T, n_heads, d)), (0, 2, 1, 3))

    q = heads(xq @ w[prefix + ".q"], Tq)
    k = heads(xkv @ w[prefix + ".k"], Tk)
    v = heads(xkv @ w[prefix + ".v"], Tk)
    scores = ad.mul(q @ ad.transpose(k), 1.0 / np.sqrt(d))
    att = ad.softmax(scores, mask=mask)
    ctx = ad.reshape(ad.transpose(att @ v, (0, 2, 1, 3)), (B, Tq, n))
    return ctx @ w[prefix + ".o"]


def _ffn(x: Tensor, w: Mapping[str, Tensor], prefix: str) -> Tensor:
    h = ad.relu(x @ w[prefix + ".w1"] + w[prefix + ".b1"])
    return h @ w[prefix + ".w2"] + w[prefix + ".b2"]


def _ln(x: Tensor, w, prefix: str) -> Tensor:
    return ad.layer_norm(x, w[prefix + ".g"], w[prefix + ".b"])


@dataclass
class Batch:
    """Fixed-length padded arrays for a list of instances."""
    src: np.ndarray       # [B, S]
    tgt_in: np.ndarray    # [B, T]  BOS + summary
    tgt_out: np.ndarray   # [B, T]  summary + EOS
    src_mask: np.ndarray  # [B, S] bool
    tgt_mask: np.ndarray  # [B, T] bool
    truncated: int = 0

    @property
    def size(self) -> int:
        return self.src.shape[0]


def make_batch(instances: Sequence[Instance], cfg: ModelConfig) -> Batch:
    B, S, T = len(instances), cfg.max_src_len, cfg.max_tgt_len
    src = np.full((B, S), PAD, dtype=np.int64)
    tin = np.full((B, T), PAD, dtype=np.int64)
    tout = np.full((B, T), PAD, dtype=np.int64)
    truncated = 0
    for i, inst in enumerate(instances):
        s = inst.source
        if len(s) > S:
            truncated += 1
            s = s[:S]
        src[i, :len(s)] = s
        y = list(inst.summary)[:T - 1]
        tin[i, :len(y) + 1] = [BOS] + y
        tout[i, :len(y) + 1] = y + [EOS]
    if truncated:
        log.warning("truncated %d source sequence(s) to max_src_len=%d", truncated, S)
    return Batch(src, tin, tout, src != PAD, tout != PAD, truncated)


@dataclass
class EncodedBatch:
    """Frozen-backbone activations below the first adapter layer, reused every step."""
    batch: Batch
    enc: np.ndarray    # [B, S, n]
    lower: np.ndarray  # [B, T, n] input to the lowest adapted decoder layer

    def take(self, idx) -> "EncodedBatch":
        b = self.batch
        sub = Batch(b.src[idx], b.tgt_in[idx], b.tgt_out[idx], b.src_mask[idx], b.tgt_mask[idx])
        return EncodedBatch(sub, self.enc[idx], self.lower[idx])


@dataclass
class DualOutput:
    q_g: np.ndarray  # teacher distribution, no gradient path
    q_l: Tensor      # student distribution


class Summarizer:
    """Backbone weights plus forward passes.  Adapters are passed in per call."""

    def __init__(self, cfg: ModelConfig, backbone: dict[str, Tensor]):
        self.cfg = cfg
        self.w = backbone

    @classmethod
    def random(cls, cfg: ModelConfig, seed: int) -> "Summarizer":
        m = cls(cfg, init_backbone(cfg, seed))
        m.freeze()
        return m

    def freeze(self) -> None:
        for t in self.w.values():
            t.requires_grad = False
            t.grad = None

    def backbone_snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.w.items()}

    @property
    def first_adapted(self) -> int:
        return min(self.cfg.adapter_layers) if self.cfg.adapter_layers else self.cfg.n_decoder_layers + 1

    # -- masks
    def _masks(self, src_mask: np.ndarray, tgt_mask: np.ndarray):
        T = tgt_mask.shape[1]
        enc_mask = src_mask[:, None, None, :]
        causal = np.tril(np.ones((T, T), dtype=bool))
        self_mask = causal[None, None] & tgt_mask[:, None, None, :]
        # BOS is always present, so no row of self_mask is empty
        return enc_mask, self_mask, enc_mask

    # -- encoder
    def encode(self, src: np.ndarray, src_mask: np.ndarray | None = None) -> Tensor:
        src = np.atleast_2d(np.asarray(src, dtype=np.int64))
        if src.shape[1] > self.cfg.max_src_len:
            log.warning("truncating source of length %d to %d", src.shape[1], self.cfg.max_src_len)
            src = src[:, :self.cfg.max_src_len]
        if src_mask is None:
            src_mask = src != PAD
        S = src.shape[1]
        w = self.w
        x = ad.embedding_lookup(w["emb.word"], src) + ad.embedding_lookup(w["enc.pos"], np.arange(S))
        mask = src_mask[:, None, None, :]
        for i in range(1, self.cfg.n_encoder_layers + 1):
            p = f"enc{i}"
            x = _ln(x + _attention(x, x, w, p + ".self", mask, self.cfg.n_heads), w, p + ".ln1")
            x = _ln(x + _ffn(x, w, p + ".ffn"), w, p + ".ln2")
        return x

    # -- decoder
    def _dec_layer(self, i: int, y: Tensor, enc: Tensor, self_mask, cross_mask) -> Tensor:
        w, p = self.w, f"dec{i}"
        y = _ln(y + _attention(y, y, w, p + ".self", self_mask, self.cfg.n_heads), w, p + ".ln1")
        y = _ln(y + _attention(y, enc, w, p + ".cross", cross_mask, self.cfg.n_heads), w, p + ".ln2")
        return _ln(y + _ffn(y, w, p + ".ffn"), w, p + ".ln3")

    def _embed_tgt(self, tgt: np.ndarray) -> Tensor:
        w = self.w
        T = tgt.shape[1]
        pos = ad.embedding_lookup(w["dec.pos"], np.arange(T))
        return ad.embedding_lookup(w["emb.word"], tgt) + pos

    def decode_range(self, y: Tensor, enc: Tensor, src_mask, tgt_mask, start: int, stop: int,
                     adapters: Mapping[str, Tensor] | None) -> Tensor:
        _, self_mask, cross_mask = self._masks(src_mask, tgt_mask)
        for i in range(start, stop + 1):
            y = self._dec_layer(i, y, enc, self_mask, cross_mask)
            if adapters is not None and i in self.cfg.adapter_layers:
                a = f"adapter{i}."
                y = adapter_forward(y, adapters[a + "W_down"], adapters[a + "W_up"],
                                    adapters[a + "ln_gain"], adapters[a + "ln_bias"])
        return y

    def distribution(self, y: Tensor) -> Tensor:
        return ad.softmax(y @ self.w["head"])

    def forward_plain(self, batch: Batch, adapters: Mapping[str, Tensor] | None = None) -> Tensor:
        """Full pass (used for backbone pretraining); returns q over the vocabulary."""
        enc = self.encode(batch.src, batch.src_mask)
        y = self._embed_tgt(batch.tgt_in)
        y = self.decode_range(y, enc, batch.src_mask, batch.tgt_mask, 1, self.cfg.n_decoder_layers, adapters)
        return self.distribution(y)

    def prepare(self, instances: Sequence[Instance]) -> EncodedBatch:
        batch = make_batch(instances, self.cfg)
        with no_grad():
            enc = self.encode(batch.src, batch.src_mask)
            y = self._embed_tgt(batch.tgt_in)
            y = self.decode_range(y, enc, batch.src_mask, batch.tgt_mask, 1, self.first_adapted - 1, None)
        return EncodedBatch(batch, enc.data, y.data)

    def _upper(self, eb: EncodedBatch, adapters: Mapping[str, Tensor]) -> Tensor:
        b = eb.batch
        y = self.decode_range(Tensor(eb.lower), Tensor(eb.enc), b.src_mask, b.tgt_mask,
                              self.first_adapted, self.cfg.n_decoder_layers, adapters)
        return self.distribution(y)

    def decode_dual(self, eb: EncodedBatch, global_params: Mapping[str, Tensor],
                    local_params: Mapping[str, Tensor], need_teacher: bool = True) -> DualOutput:
        check_paramset(self.cfg, global_params)
        check_paramset(self.cfg, local_params)
        q_g = None
        if need_teacher:
            with no_grad():
                q_g = self._upper(eb, global_params).data
        q_l = self._upper(eb, local_params)
        return DualOutput(q_g, q_l)

    def local_distribution(self, eb: EncodedBatch, params: Mapping[str, Tensor]) -> np.ndarray:
        with no_grad():
            return self._upper(eb, params).data

    def generate(self, sources: Sequence[Sequence[int]], params: Mapping[str, Tensor],
                 max_len: int | None = None) -> list[list[int]]:
        """Greedy decoding through the local adapter path; ties go to the lowest id."""
        cfg = self.cfg
        max_len = cfg.max_tgt_len if max_len is None else min(max_len, cfg.max_tgt_len)
        B, S = len(sources), cfg.max_src_len
        src = np.full((B, S), PAD, dtype=np.int64)
        for i, s in enumerate(sources):
            s = list(s)[:S]
            src[i, :len(s)] = s
        src_mask = src != PAD
        out = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        with no_grad():
            enc = self.encode(src, src_mask)
            prefix = np.full((B, 1), BOS, dtype=np.int64)
            for _ in range(max_len):
                tmask = np.ones_like(prefix, dtype=bool)
                y = self.decode_range(self._embed_tgt(prefix), enc, src_mask, tmask, 1,
                                      cfg.n_decoder_layers, params)
                logits = (y @ self.w["head"]).data[:, -1]
                nxt = np.argmax(logits, axis=-1)
                for i in range(B):
                    if not done[i]:
                        if nxt[i] == EOS:
                            done[i] = True
                        else:
                            out[i].append(int(nxt[i]))
                if done.all():
                    break
                prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
        return out


def batch_ce(q: Tensor, batch: Batch) -> Tensor:
    """Mean cross-entropy over non-pad target positions."""
    ce = ad.cross_entropy(q, batch.tgt_out)
    mask = batch.tgt_mask.astype(np.float64)
    return ad.mul(ce, mask).sum() * (1.0 / mask.sum())


def pretrain_backbone(cfg: ModelConfig, corpus: Sequence[Instance], steps: int, seed: int,
                      lr: float = 2e-3, batch_size: int = 16, warmup: int = 300,
                      clip: float = 1.0) -> Summarizer:
    """Train the whole backbone with plain cross-entropy, then freeze it.

    Neutral adapters occupy the adapter sites during pretraining, so the layers
    above them learn to read normalized activations and a freshly initialized
    adapter starts as a small perturbation.  Linear warmup and global-norm
    clipping keep the post-LN stack stable at this learning rate.
    """
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    model = Summarizer(cfg, init_backbone(cfg, seed))
    for t in model.w.values():
        t.requires_grad = True
    state = AdamWState(lr=lr, weight_decay=0.01)
    slots = neutral_adapters(cfg)
    r = make_rng(seed, "pretrain-order")
    for step in range(steps):
        state.lr = lr * min(1.0, (step + 1) / warmup)
        idx = r.integers(0, len(corpus), batch_size)
        batch = make_batch([corpus[i] for i in idx], cfg)
        loss = batch_ce(model.forward_plain(batch, slots), batch)
        ad.backward(loss, model.w.values())
        norm = np.sqrt(sum(float((t.grad ** 2).sum()) for t in model.w.values()))
        if norm > clip:
            for t in model.w.values():
                t.grad = t.grad * (clip / norm)
        adamw_step(model.w, state)
        if step % 500 == 0:
            log.info("pretrain step %d loss %.4f", step, float(loss.data))
    model.freeze()
    return model


def held_out_ce(model: Summarizer, instances: Sequence[Instance],
                adapters: Mapping[str, Tensor] | None = None) -> float:
    if adapters is None:
        adapters = neutral_adapters(model.cfg)
    batch = make_batch(instances, model.cfg)
    with no_grad():
        return float(batch_ce(model.forward_plain(batch, adapters), batch).data)

