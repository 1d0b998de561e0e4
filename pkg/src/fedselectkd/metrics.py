"""Token-level ROUGE, per-client evaluation and the KD token-class report."""
from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor, cross_entropy
from .data import EOS, PAD, Instance
from .kd import CLASS_CODES, TokenTrace


@dataclass(frozen=True)
class PRF:
    p: float
    r: float
    f1: float


def _prf(overlap: int, n_hyp: int, n_ref: int) -> PRF:
    p = overlap / n_hyp if n_hyp else 0.0
    r = overlap / n_ref if n_ref else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return PRF(p, r, f1)


def strip(tokens: Sequence[int]) -> list[int]:
    """Drop padding and cut at the first EOS."""
    out = []
    for t in tokens:
        if t == EOS:
            break
        if t != PAD:
            out.append(int(t))
    return out


def ngrams(tokens: Sequence[int], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(hyp: Sequence[int], ref: Sequence[int], n: int = 1) -> PRF:
    if n not in (1, 2):
        raise ValueError(f"rouge_n supports n in {{1, 2}}, got {n}")
    h, r = ngrams(list(hyp), n), ngrams(list(ref), n)
    overlap = sum((h & r).values())
    return _prf(overlap, sum(h.values()), sum(r.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: Sequence[int], ref: Sequence[int]) -> PRF:
    return _prf(lcs_length(list(hyp), list(ref)), len(hyp), len(ref))


@dataclass(frozen=True)
class RougeScore:
    r1: PRF
    r2: PRF
    rl: PRF

    def f1s(self) -> dict[str, float]:
        return {"rouge1": self.r1.f1, "rouge2": self.r2.f1, "rougeL": self.rl.f1}

    def to_dict(self) -> dict:
        return asdict(self)


def score(hyp: Sequence[int], ref: Sequence[int]) -> RougeScore:
    hyp, ref = strip(hyp), strip(ref)
    return RougeScore(rouge_n(hyp, ref, 1), rouge_n(hyp, ref, 2), rouge_l(hyp, ref))


def mean_score(scores: Sequence[RougeScore]) -> RougeScore:
    def avg(get):
        return PRF(*(float(np.mean([getattr(get(s), k) for s in scores])) for k in ("p", "r", "f1")))

    return RougeScore(avg(lambda s: s.r1), avg(lambda s: s.r2), avg(lambda s: s.rl))


def teacher_forced_ce(model, params: Mapping[str, Tensor], instances: Sequence[Instance], encoded=None) -> float:
    """Token-mean cross-entropy of the local path on gold prefixes."""
    eb = encoded if encoded is not None else model.prepare(instances)
    q = model.local_distribution(eb, params)
    ce = cross_entropy(Tensor(q), eb.batch.tgt_out).data
    mask = eb.batch.tgt_mask
    return float((ce * mask).sum() / mask.sum())


def evaluate_client(model, params: Mapping[str, Tensor], test: Sequence[Instance],
                    encoded=None) -> tuple[RougeScore, float]:
    """Greedy-decode every test instance; mean ROUGE F1s and teacher-forced CE."""
    if not test:
        raise ValueError("empty test set")
    hyps = model.generate([inst.source for inst in test], params)
    scores = [score(h, inst.summary) for h, inst in zip(hyps, test)]
    ce = teacher_forced_ce(model, params, test, encoded) if hasattr(model, "local_distribution") else float("nan")
    return mean_score(scores), ce


def kd_class_report(traces: Sequence[TokenTrace]) -> dict:
    """Per-class KD fractions and each class's share of the KD-applied events."""
    totals = Counter(t.token_class for t in traces)
    applied = Counter(t.token_class for t in traces if t.kd_applied)
    n_applied = sum(applied.values())
    report = {
        "events": len(traces),
        "kd_events": n_applied,
        "kd_fraction": {c: applied[c] / totals[c] for c in CLASS_CODES if totals[c]},
        "kd_share": {c: applied[c] / n_applied for c in CLASS_CODES if applied[c]} if n_applied else {},
        "no_distillation": n_applied == 0,
    }
    return report
