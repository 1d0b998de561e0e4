"""Independent oracles and shared fixtures-as-functions for the test suite."""
from __future__ import annotations

import functools
import itertools
import os
from collections import Counter
from pathlib import Path

import numpy as np

from fedselectkd import autodiff as ad
from fedselectkd.autodiff import Tensor
from fedselectkd.config import RunConfig
from fedselectkd.data import build_vocab
from fedselectkd.model import ModelConfig, Summarizer
from fedselectkd.runner import load_backbone

REPO = Path(__file__).resolve().parents[1]

TINY = ModelConfig(vocab_size=96, model_dim=8, bottleneck_dim=4, n_encoder_layers=1, n_decoder_layers=2,
                   n_heads=2, ffn_dim=16)


def cache_dir() -> Path:
    env = os.environ.get("FSKD_CACHE")
    return Path(env) if env else REPO / ".fskd_cache"


@functools.lru_cache(maxsize=None)
def pretrained() -> Summarizer:
    """Default pretrained backbone (trained once, then read from the on-disk cache)."""
    return load_backbone(RunConfig(cache_dir=str(cache_dir())))


@functools.lru_cache(maxsize=None)
def vocab():
    return build_vocab()


# ---------------------------------------------------------------- finite differences

def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(num / den)


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def gradcheck(fn, arrays: list[np.ndarray], rng: np.random.Generator, h: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences for ``sum(fn(*xs) * R)``."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = rng.standard_normal(out.shape)
    loss = ad.tsum(ad.mul(out, proj))
    ad.backward(loss, tensors)
    worst = 0.0
    for t in tensors:
        def f():
            with ad.no_grad():
                return float((fn(*[Tensor(x.data) for x in tensors]).data * proj).sum())
        worst = max(worst, rel_err(t.grad, numeric_grad(f, t.data, h)))
    return worst


# ---------------------------------------------------------------- random op cases

def _shape(rng, rank=2, lo=1, hi=4):
    return tuple(int(s) for s in rng.integers(lo, hi + 1, size=rank))


def _away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < 0.05, 0.05 * np.sign(x + 1e-12) + x, x)


def op_case(op, rng):
    """Random inputs and a function for one differentiable op."""
    if op == "add":
        s = _shape(rng)
        return (lambda a, b: ad.add(a, b)), [rng.standard_normal(s), rng.standard_normal(s[1:])]
    if op == "mul":
        s = _shape(rng)
        return (lambda a, b: ad.mul(a, b)), [rng.standard_normal(s), rng.standard_normal(s)]
    if op == "neg":
        return (lambda a: ad.neg(a)), [rng.standard_normal(_shape(rng))]
    if op == "relu":
        return (lambda a: ad.relu(a)), [_away_from_zero(rng, _shape(rng))]
    if op == "log":
        return (lambda a: ad.log(a)), [rng.uniform(0.2, 3.0, _shape(rng))]
    if op == "matmul":
        b, n, k, m = _shape(rng, 4)
        return (lambda x, w: ad.matmul(x, w)), [rng.standard_normal((b, n, k)), rng.standard_normal((k, m))]
    if op == "matmul_batched":
        b, n, k, m = _shape(rng, 4)
        return (lambda x, y: ad.matmul(x, y)), [rng.standard_normal((b, n, k)), rng.standard_normal((b, k, m))]
    if op == "transpose":
        return (lambda a: ad.transpose(a, (2, 0, 1))), [rng.standard_normal(_shape(rng, 3))]
    if op == "reshape":
        a, b, c = _shape(rng, 3)
        return (lambda x: ad.reshape(x, (a * b, c))), [rng.standard_normal((a, b, c))]
    if op == "concat":
        s = _shape(rng)
        t = (s[0], int(rng.integers(1, 4)))
        return (lambda x, y: ad.concat([x, y], axis=-1)), [rng.standard_normal(s), rng.standard_normal(t)]
    if op == "sum":
        axis = int(rng.integers(0, 2))
        return (lambda x: ad.tsum(x, axis=axis, keepdims=True)), [rng.standard_normal(_shape(rng))]
    if op == "embedding":
        V, d = _shape(rng, 2, 2, 5)
        ids = rng.integers(0, V, size=_shape(rng))
        return (lambda t: ad.embedding_lookup(t, ids)), [rng.standard_normal((V, d))]
    if op == "softmax":
        s = _shape(rng, 2, 1, 5)
        mask = rng.random(s) < 0.7
        mask[..., 0] = True
        return (lambda x: ad.softmax(x, mask)), [rng.standard_normal(s)]
    if op == "layer_norm":
        b, n = _shape(rng, 2, 2, 6)
        return ((lambda x, g, c: ad.layer_norm(x, g, c)),
                [rng.standard_normal((b, n)), rng.standard_normal(n), rng.standard_normal(n)])
    if op == "cross_entropy":
        b, V = _shape(rng, 2, 2, 5)
        tg = rng.integers(0, V, size=b)
        q = rng.uniform(0.05, 1.0, (b, V))
        return (lambda x: ad.cross_entropy(x, tg)), [q]
    if op == "kl":
        b, V = _shape(rng, 2, 2, 5)
        p = rng.dirichlet(np.ones(V), size=b)
        p[0, 0] = 0.0  # zero-target terms contribute nothing
        p[0] /= p[0].sum()
        return (lambda x: ad.kl_divergence(p, x)), [rng.uniform(0.05, 1.0, (b, V))]
    raise KeyError(op)


OPS = ["add", "mul", "neg", "relu", "log", "matmul", "matmul_batched", "transpose", "reshape", "concat",
       "sum", "embedding", "softmax", "layer_norm", "cross_entropy", "kl"]


# ---------------------------------------------------------------- adapter oracle

def direct_adapter(y, W_down, W_up, gain, bias, eps=ad.LN_EPS):
    """LayerNorm(y + ReLU(y W_down) W_up) written out element by element."""
    y = np.atleast_2d(y)
    out = np.empty_like(y)
    n, m = W_down.shape
    for r in range(y.shape[0]):
        hidden = [max(0.0, sum(y[r, i] * W_down[i, j] for i in range(n))) for j in range(m)]
        z = [y[r, k] + sum(hidden[j] * W_up[j, k] for j in range(m)) for k in range(n)]
        mu = sum(z) / n
        var = sum((v - mu) ** 2 for v in z) / n
        out[r] = [gain[k] * (z[k] - mu) / np.sqrt(var + eps) + bias[k] for k in range(n)]
    return out


# ---------------------------------------------------------------- ROUGE oracles

def oracle_rouge_n(hyp, ref, n):
    """Brute-force clipped n-gram matching: greedily pair each hyp n-gram with an unused equal ref n-gram."""
    hg = [tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1)]
    rg = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
    used = [False] * len(rg)
    overlap = 0
    for g in hg:
        for j, r in enumerate(rg):
            if not used[j] and r == g:
                used[j] = True
                overlap += 1
                break
    return _prf(overlap, len(hg), len(rg))


@functools.lru_cache(maxsize=None)
def subsequences(seq: tuple) -> frozenset:
    return frozenset(tuple(seq[i] for i in idx) for k in range(len(seq) + 1)
                     for idx in itertools.combinations(range(len(seq)), k))


def oracle_lcs(a, b) -> int:
    common = subsequences(tuple(a)) & subsequences(tuple(b))
    return max(len(s) for s in common)


def oracle_rouge_l(hyp, ref):
    return _prf(oracle_lcs(hyp, ref), len(hyp), len(ref))


def _prf(overlap, nh, nr):
    p = overlap / nh if nh else 0.0
    r = overlap / nr if nr else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def canonical_pairs(alphabet: int, max_len: int):
    """Every (hyp, ref) pair up to a relabeling of the alphabet.

    Tokens are numbered by first appearance across hyp+ref, so each
    equivalence class of pairs under alphabet permutations appears once.
    ROUGE only compares tokens for equality, hence is invariant under such
    relabelings (checked separately on random pairs).
    """
    def rgs(length, used):
        if length == 0:
            yield ()
            return
        for t in range(min(used + 1, alphabet)):
            for rest in rgs(length - 1, max(used, t + 1)):
                yield (t,) + rest
    for lh in range(max_len + 1):
        for lr in range(max_len + 1):
            for s in rgs(lh + lr, 0):
                yield s[:lh], s[lh:]


def prf_tuple(prf) -> tuple[float, float, float]:
    return prf.p, prf.r, prf.f1


def counts(tokens) -> Counter:
    return Counter(tokens)


# ---------------------------------------------------------------- acceptance bookkeeping

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def criterion_line(n: int, ok: bool, detail: str) -> str:
    return f"CRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
