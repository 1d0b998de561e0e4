"""Synthetic multi-domain query-focused summarization data.

Each instance is ``query ++ [SEP] ++ transcript -> summary`` where the summary
is produced by a fixed extraction rule, so the mapping is learnable and the
gold output is unambiguous.  Domains differ in CONTENT vocabulary (controlled
by ``skew``), transcript shape and rule parameters.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np

from .seeding import stream

PAD, BOS, EOS, SEP = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "#SEP#")
CONTENT, FUNCTION, SPECIAL = "CONTENT", "FUNCTION", "SPECIAL"

DOMAINS = ("academic", "committee", "product", "chat")
GENERIC = "generic"
N_BLOCKS = len(DOMAINS)
N_SPEAKERS = 4
# one query marker per domain plus the generic one, two connectives each
N_MARKERS = N_BLOCKS + 1
N_CONNECTIVES = 2 * N_MARKERS
MIN_FUNCTION = N_MARKERS + N_SPEAKERS + N_CONNECTIVES + 1

# Table II (QMSum) train/valid/test counts.
TABLE_SIZES = {
    "academic": (218, 45, 49),
    "committee": (284, 67, 66),
    "product": (593, 125, 129),
}
BALANCED_SIZES = (200, 40, 40)
CHAT_POOL_FACTOR = 4

PRESETS = ("noniid_unbalanced", "iid_balanced", "noniid_balanced", "extreme_fourth")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    content: tuple[int, ...]
    function: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.tokens)

    def token_class(self, tid: int) -> str:
        if tid < len(SPECIALS):
            return SPECIAL
        return CONTENT if tid in self._content_set else FUNCTION

    @cached_property
    def _content_set(self) -> frozenset[int]:
        return frozenset(self.content)

    # fixed role layout inside the FUNCTION class
    @property
    def markers(self) -> tuple[int, ...]:
        return self.function[:N_MARKERS]

    @property
    def speakers(self) -> tuple[int, ...]:
        return self.function[N_MARKERS:N_MARKERS + N_SPEAKERS]

    @property
    def connectives(self) -> tuple[int, ...]:
        start = N_MARKERS + N_SPEAKERS
        return self.function[start:start + N_CONNECTIVES]

    @property
    def fillers(self) -> tuple[int, ...]:
        return self.function[N_MARKERS + N_SPEAKERS + N_CONNECTIVES:]

    def content_block(self, index: int) -> tuple[int, ...]:
        size = len(self.content) // N_BLOCKS
        return self.content[index * size:(index + 1) * size]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)


def build_vocab(size: int = 96, content_fraction: float = 0.7, seed: int = 0) -> Vocab:
    if size < 16:
        raise DataError(f"vocab size {size} below minimum 16")
    rest = size - len(SPECIALS)
    n_content = int(round(content_fraction * rest))
    n_function = rest - n_content
    if n_content < N_BLOCKS or n_function < MIN_FUNCTION:
        raise DataError(
            f"vocab size {size} cannot host {len(SPECIALS)} specials, {N_BLOCKS} content blocks "
            f"and {MIN_FUNCTION} function tokens (got {n_content} content, {n_function} function)")
    rng = np.random.default_rng(stream(seed, "vocab"))
    ids = rng.permutation(np.arange(len(SPECIALS), size))
    content = tuple(sorted(int(i) for i in ids[:n_content]))
    function = tuple(sorted(int(i) for i in ids[n_content:]))
    tokens = list(SPECIALS) + [""] * rest
    for k, i in enumerate(content):
        tokens[i] = f"c{k:02d}"
    for k, i in enumerate(function):
        tokens[i] = f"f{k:02d}"
    return Vocab(tuple(tokens), content, function)


@dataclass(frozen=True)
class DomainSpec:
    name: str
    index: int  # content block / marker slot
    skew: float
    turns: tuple[int, int]
    words_per_turn: tuple[int, int]
    content_rate: float
    n_keywords: int
    span: int  # words copied after each keyword, within its turn
    marker_slot: int = -1  # -1: same as index
    conn_slot: int = -1

    def __post_init__(self):
        if self.marker_slot < 0:
            object.__setattr__(self, "marker_slot", self.index)
        if self.conn_slot < 0:
            object.__setattr__(self, "conn_slot", self.index)
        if not 0.0 <= self.skew <= 1.0:
            raise DataError(f"skew must lie in [0, 1], got {self.skew}")


def domain_spec(name: str, skew: float) -> DomainSpec:
    """Per-domain shape knobs, loosely scaled from the QMSum / SAMSum statistics."""
    if name == "academic":
        return DomainSpec(name, 0, skew, (4, 5), (3, 5), 0.55, 2, 1)
    if name == "committee":
        return DomainSpec(name, 1, skew, (2, 2), (7, 9), 0.55, 2, 3)
    if name == "product":
        return DomainSpec(name, 2, skew, (5, 6), (2, 4), 0.6, 2, 2)
    if name == "chat":
        return DomainSpec(name, 3, skew, (1, 1), (2, 3), 0.8, 1, 1)
    if name == GENERIC:
        return DomainSpec(name, N_BLOCKS, 0.0, (2, 5), (4, 6), 0.55, 2, 3)
    raise DataError(f"unknown domain {name!r}")


@dataclass
class Instance:
    domain: str
    query: list[int]
    transcript: list[int]
    summary: list[int]
    classes: list[str]

    @property
    def source(self) -> list[int]:
        return self.query + [SEP] + self.transcript

    def to_record(self) -> dict:
        return {"domain": self.domain, "query": self.query, "transcript": self.transcript,
                "summary": self.summary, "classes": self.classes}

    @classmethod
    def from_record(cls, rec: dict) -> "Instance":
        return cls(rec["domain"], list(rec["query"]), list(rec["transcript"]),
                   list(rec["summary"]), list(rec["classes"]))


def _draw_content(vocab: Vocab, spec: DomainSpec, rng: np.random.Generator, used: set[int]) -> int:
    own = vocab.content_block(spec.index) if spec.index < N_BLOCKS else vocab.content
    for _ in range(64):
        pool = own if rng.random() < spec.skew else vocab.content
        tid = int(pool[rng.integers(len(pool))])
        if tid not in used:
            return tid
    free = [t for t in own if t not in used] or [t for t in vocab.content if t not in used]
    return int(free[rng.integers(len(free))])


def summarize(vocab: Vocab, spec: DomainSpec, keywords: list[int], turns: list[list[int]]) -> list[int]:
    """The extraction rule: per keyword, a connective, the keyword, then up to
    ``span`` following words of the same turn."""
    conns = vocab.connectives[2 * spec.conn_slot:2 * spec.conn_slot + 2]
    out: list[int] = []
    for j, kw in enumerate(keywords):
        for turn in turns:
            if kw in turn:
                after = turn[turn.index(kw) + 1:][:spec.span]
                out += [conns[j % 2], kw] + after
                break
    return out


def generate_instance(vocab: Vocab, spec: DomainSpec, rng: np.random.Generator) -> Instance:
    content = set(vocab.content)
    used: set[int] = set()
    turns: list[list[int]] = []
    n_turns = int(rng.integers(spec.turns[0], spec.turns[1] + 1))
    while True:
        turns.clear()
        used.clear()
        for _ in range(n_turns):
            turn = [int(vocab.speakers[rng.integers(N_SPEAKERS)])]
            for _ in range(int(rng.integers(spec.words_per_turn[0], spec.words_per_turn[1] + 1))):
                if rng.random() < spec.content_rate:
                    tid = _draw_content(vocab, spec, rng, used)
                    used.add(tid)
                else:
                    tid = int(vocab.fillers[rng.integers(len(vocab.fillers))])
                turn.append(tid)
            turns.append(turn)
        bearing = [i for i, t in enumerate(turns) if any(x in content for x in t)]
        if len(bearing) >= 1 and len(used) >= spec.n_keywords:
            break
    # keywords come from distinct turns when possible, kept in transcript order
    k = spec.n_keywords
    chosen_turns = sorted(rng.choice(bearing, size=min(k, len(bearing)), replace=False).tolist())
    keywords: list[int] = []
    for ti in chosen_turns:
        cands = [x for x in turns[ti] if x in content]
        keywords.append(int(cands[rng.integers(len(cands))]))
    while len(keywords) < k:
        rest = [x for t in turns for x in t if x in content and x not in keywords]
        keywords.append(int(rest[rng.integers(len(rest))]))
    position = {x: i for i, x in enumerate(x for t in turns for x in t)}
    keywords.sort(key=position.__getitem__)
    summary = summarize(vocab, spec, keywords, turns)
    return Instance(
        domain=spec.name,
        query=[int(vocab.markers[spec.marker_slot])] + keywords,
        transcript=[x for t in turns for x in t],
        summary=summary,
        classes=[vocab.token_class(t) for t in summary],
    )


def generate_pool(vocab: Vocab, spec: DomainSpec, n: int, seed: int, *tags: str) -> list[Instance]:
    rng = np.random.default_rng(stream(seed, "data", spec.name, *tags))
    return [generate_instance(vocab, spec, rng) for _ in range(n)]


def max_source_len(spec: DomainSpec) -> int:
    return 1 + spec.n_keywords + 1 + spec.turns[1] * (1 + spec.words_per_turn[1])


def max_summary_len(spec: DomainSpec) -> int:
    return spec.n_keywords * (2 + spec.span)


@dataclass
class ClientData:
    name: str
    domain: str
    train: list[Instance]
    valid: list[Instance]
    test: list[Instance]

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.valid), len(self.test)


def _scaled(sizes: tuple[int, int, int], scale: float) -> tuple[int, int, int]:
    return tuple(max(1, int(s * scale + 0.5)) for s in sizes)


def _split(pool: list[Instance], sizes: tuple[int, int, int]):
    a, b, c = sizes
    return pool[:a], pool[a:a + b], pool[a + b:a + b + c]


def _domain_client(vocab, name, skew, sizes, seed) -> ClientData:
    spec = domain_spec(name, skew)
    pool = generate_pool(vocab, spec, sum(sizes), seed)
    return ClientData(name, name, *_split(pool, sizes))


def make_setting(vocab: Vocab, preset: str = "noniid_unbalanced", seed: int = 0,
                 scale: float = 0.1, skew: float = 0.9) -> list[ClientData]:
    """Per-client train/valid/test splits for one of the four experimental settings."""
    if preset not in PRESETS:
        raise DataError(f"unknown preset {preset!r}; expected one of {', '.join(PRESETS)}")
    domains = DOMAINS[:3]
    if preset == "noniid_unbalanced":
        return [_domain_client(vocab, d, skew, _scaled(TABLE_SIZES[d], scale), seed) for d in domains]
    if preset == "noniid_balanced":
        return [_domain_client(vocab, d, skew, _scaled(BALANCED_SIZES, scale), seed) for d in domains]
    if preset == "extreme_fourth":
        clients = [_domain_client(vocab, d, skew, _scaled(BALANCED_SIZES, scale), seed) for d in domains]
        big = tuple(CHAT_POOL_FACTOR * s for s in BALANCED_SIZES)
        clients.append(_domain_client(vocab, "chat", skew, _scaled(big, scale), seed))
        return clients
    # iid_balanced: every domain's splits cut into thirds, one third per client
    rng = np.random.default_rng(stream(seed, "iid-split"))
    parts: list[list[list[Instance]]] = [[[], [], []] for _ in range(3)]
    for d in domains:
        sizes = _scaled(TABLE_SIZES[d], scale)
        pool = generate_pool(vocab, domain_spec(d, skew), sum(sizes), seed)
        for s, split in enumerate(_split(pool, sizes)):
            order = rng.permutation(len(split))
            for c in range(3):
                parts[c][s] += [split[i] for i in order[c::3]]
    return [ClientData(f"client{c}", "mixed", *parts[c]) for c in range(3)]


def pretraining_corpus(vocab: Vocab, n: int, seed: int) -> list[Instance]:
    """Generic pooled text for the backbone, on a stream disjoint from every client split.

    Marker, connective pair and span are drawn independently per instance, so
    the backbone learns the copy mechanics and every token but not which
    domain uses which convention.
    """
    rng = np.random.default_rng(stream(seed, "data", GENERIC, "pretrain"))
    base = domain_spec(GENERIC, 0.0)
    out = []
    for _ in range(n):
        spec = replace(base, span=int(rng.integers(1, 4)), marker_slot=int(rng.integers(N_MARKERS)),
                       conn_slot=int(rng.integers(N_MARKERS)))
        out.append(generate_instance(vocab, spec, rng))
    return out


def write_jsonl(instances: Iterable[Instance], path: Path) -> None:
    with open(path, "w") as f:
        for inst in instances:
            f.write(json.dumps(inst.to_record(), separators=(",", ":")) + "\n")


def read_jsonl(path: Path) -> list[Instance]:
    with open(path) as f:
        return [Instance.from_record(json.loads(line)) for line in f if line.strip()]


def content_overlap(a: Iterable[Instance], b: Iterable[Instance], vocab: Vocab) -> set[int]:
    content = set(vocab.content)
    ta = {t for inst in a for t in inst.transcript if t in content}
    tb = {t for inst in b for t in inst.transcript if t in content}
    return ta & tb

