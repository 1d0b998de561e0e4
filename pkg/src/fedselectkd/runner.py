"""Run orchestration: backbone cache, training loop, metrics/report/trace files, compare."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .autodiff import Tensor
from .config import RunConfig
from .data import build_vocab, make_setting, pretraining_corpus, write_jsonl
from .federation import ClientState, Strategy, init_server, pack_params, run_round
from .kd import TokenTrace, kd_usage_stats
from .metrics import kd_class_report
from .model import Summarizer, payload_size, pretrain_backbone

log = logging.getLogger(__name__)

METRICS = "metrics.jsonl"
REPORT = "report.json"
TRACES = "traces.jsonl"
RESOLVED = "config.resolved.json"
STATE_DIR = "state"


class RunError(RuntimeError):
    pass


class ResumeError(ValueError):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=True)


# ---------------------------------------------------------------- backbone

def cache_dir(cfg: RunConfig) -> Path:
    if cfg.cache_dir:
        return Path(cfg.cache_dir)
    return Path(os.environ.get("FSKD_CACHE", Path.home() / ".cache" / "fedselectkd"))


def load_backbone(cfg: RunConfig) -> Summarizer:
    """Pretrained frozen backbone, trained once per (model, backbone seed, schedule) and cached.

    Weights are always used at 32-bit precision, so a fresh pretrain and a
    cache hit give the same model bit for bit.
    """
    mcfg = cfg.model()
    key = cfg.backbone_key()
    path = cache_dir(cfg) / f"backbone-{key}.ckpt"
    khash = hashlib.sha256(key.encode()).digest()
    if path.exists():
        weights = checkpoint.load(path, expected_hash=khash)
    else:
        vocab = build_vocab(cfg.vocab_size, cfg.content_fraction, cfg.backbone_seed)
        corpus = pretraining_corpus(vocab, cfg.pretrain_corpus, cfg.backbone_seed)
        log.info("pretraining backbone (%d steps); cache miss at %s", cfg.pretrain_steps, path)
        model = pretrain_backbone(mcfg, corpus, cfg.pretrain_steps, cfg.backbone_seed, lr=cfg.pretrain_lr)
        weights = checkpoint.to_float32_precision(model.backbone_snapshot())
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        checkpoint.save(tmp, weights, khash)
        tmp.replace(path)
    model = Summarizer(mcfg, {k: Tensor(v) for k, v in weights.items()})
    model.freeze()
    return model


# ---------------------------------------------------------------- traces

def trace_record(round_idx: int, cid: str, t: TokenTrace) -> dict:
    return {"round": round_idx, "client": cid, "instance": t.instance, "position": t.position,
            "entropy": t.entropy, "kd_applied": t.kd_applied, "class": t.token_class,
            "ce": t.ce, "kl": t.kl}


def trace_from_record(rec: dict) -> TokenTrace:
    return TokenTrace(rec["instance"], rec["position"], rec["entropy"], rec["kd_applied"],
                      rec["class"], rec["ce"], rec["kl"])


# ---------------------------------------------------------------- run

@dataclass
class RunResult:
    out: Path
    history: list[dict]
    report: dict
    traces: dict[str, list[TokenTrace]] = field(default_factory=dict, repr=False)


def _setup(cfg: RunConfig, model: Summarizer | None):
    vocab = build_vocab(cfg.vocab_size, cfg.content_fraction, cfg.backbone_seed)
    model = model if model is not None else load_backbone(cfg)
    data = make_setting(vocab, cfg.preset, cfg.seed, scale=cfg.scale, skew=cfg.skew)
    clients = [ClientState(d.name, d, model, cfg.seed) for d in data]
    return vocab, model, clients


def _save_state(state: Path, chash: bytes, server, clients, best, round_idx: int) -> None:
    """Exact (float64) training state after ``round_idx``, for resuming."""
    state.mkdir(exist_ok=True)
    np.savez(state / "server.npz", **server)
    for c in clients:
        np.savez(state / f"local_{c.cid}.npz", **c.snapshot_local())
    meta = {"round": round_idx, "config_hash": chash.hex(),
            "best": {cid: {"round": b[1], "valid_ce": b[0]} for cid, b in best.items()}}
    tmp = state / "progress.json.tmp"
    tmp.write_text(_dumps(meta))
    tmp.replace(state / "progress.json")


def _load_state(out: Path, chash: bytes, clients):
    state = out / STATE_DIR
    meta = json.loads((state / "progress.json").read_text())
    if meta["config_hash"] != chash.hex():
        raise ResumeError(f"cannot resume {out}: saved run has a different config hash; refusing")
    try:
        for c in clients:
            checkpoint.load(out / f"best_{c.cid}.ckpt", expected_hash=chash)
    except checkpoint.CheckpointError as e:
        raise ResumeError(f"cannot resume {out}: {e}") from e

    def npz(path):
        with np.load(path) as z:
            return {k: z[k] for k in z.files}

    server = npz(state / "server.npz")
    locals_ = {c.cid: npz(state / f"local_{c.cid}.npz") for c in clients}
    best = {cid: (b["valid_ce"], b["round"]) for cid, b in meta["best"].items()}
    return meta["round"], server, locals_, best


def run_training(cfg: RunConfig, model: Summarizer | None = None, resume: bool = False) -> RunResult:
    """Run ``cfg.rounds`` rounds and write every artifact into ``cfg.output_dir``.

    ``model`` injects an already-loaded backbone (it must match the config);
    otherwise the cached backbone is used.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = cfg.config_hash()
    state = out / STATE_DIR
    start = 1
    _, model, clients = _setup(cfg, model)
    by_id = {c.cid: c for c in clients}
    strategy = Strategy(cfg.strategy)
    kd = cfg.kd()

    server = init_server(cfg.model(), cfg.seed)
    init_payload = dict(server)
    best: dict[str, tuple[float, int]] = {}

    if resume and (state / "progress.json").exists():
        done, server, locals_, best = _load_state(out, chash, clients)
        start = done + 1
        for c in clients:
            c.receive(pack_params(server), overwrite_local=True)
            c.local = {k: Tensor(v.copy(), requires_grad=True) for k, v in locals_[c.cid].items()}
        history = [json.loads(l) for l in (out / METRICS).read_text().splitlines()][:done]
        traces_kept = []
        if cfg.save_traces and (out / TRACES).exists():
            traces_kept = [l for l in (out / TRACES).read_text().splitlines() if json.loads(l)["round"] <= done]
        log.info("resuming %s at round %d", out, start)
    else:
        if resume:
            log.info("nothing to resume in %s; starting fresh", out)
        history, traces_kept = [], []
        for c in clients:
            c.receive(pack_params(server), overwrite_local=True)

    (out / RESOLVED).write_text(cfg.dump_json())
    checkpoint.save(out / "init.ckpt", init_payload, chash)

    # metrics and traces are rewritten from the kept prefix, then appended per round
    with open(out / METRICS, "w") as f:
        f.writelines(_dumps(r) + "\n" for r in history)
    if cfg.save_traces:
        with open(out / TRACES, "w") as f:
            f.writelines(l + "\n" for l in traces_kept)
    elif (out / TRACES).exists():
        (out / TRACES).unlink()

    all_traces: dict[str, list[TokenTrace]] = {c.cid: [] for c in clients}
    for line in traces_kept:
        rec = json.loads(line)
        all_traces[rec["client"]].append(trace_from_record(rec))

    if start == 1:
        for c in clients:
            ce = c.valid_ce()
            best[c.cid] = (ce, 0)
            checkpoint.save(out / f"best_{c.cid}.ckpt", c.snapshot_local(), chash)

    for r in range(start, cfg.rounds + 1):
        server, rec = run_round(server, clients, strategy, kd, r, rate=cfg.participation, seed=cfg.seed,
                                reset_local_each_round=cfg.reset_local_each_round, workers=cfg.workers,
                                collect=True)
        row = rec.to_dict()
        evaluate = r % cfg.eval_every == 0 or r == cfg.rounds
        valid = {}
        if evaluate:
            for c in clients:
                ce = c.valid_ce()
                valid[c.cid] = ce
                if ce < best[c.cid][0] or math.isnan(best[c.cid][0]):
                    best[c.cid] = (ce, r)
                    checkpoint.save(out / f"best_{c.cid}.ckpt", c.snapshot_local(), chash)
        row["valid_ce"] = valid
        history.append(row)
        with open(out / METRICS, "a") as f:
            f.write(_dumps(row) + "\n")
        if cfg.save_traces:
            with open(out / TRACES, "a") as f:
                for cid in rec.participants:
                    f.writelines(_dumps(trace_record(r, cid, t)) + "\n" for t in rec.traces[cid])
        for cid in rec.participants:
            all_traces[cid] += rec.traces[cid]
        _save_state(state, chash, server, clients, best, r)
        log.info("round %d/%d  loss %s  valid %s", r, cfg.rounds,
                 {k: round(v, 4) for k, v in row["train_loss"].items()},
                 {k: round(v, 4) for k, v in valid.items()})

    report = build_report(cfg, out, by_id, best, all_traces, chash)
    (out / REPORT).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return RunResult(out, history, report, all_traces)


def build_report(cfg: RunConfig, out: Path, clients: dict, best: dict, traces: dict, chash: bytes) -> dict:
    per_client = {}
    for cid, c in clients.items():
        params = checkpoint.load(out / f"best_{cid}.ckpt", expected_hash=chash)
        rouge, ce = c.evaluate(params)
        tr = traces.get(cid, [])
        per_client[cid] = {
            "domain": c.domain,
            "sizes": list(c.sizes),
            "best_round": best[cid][1],
            "best_valid_ce": best[cid][0],
            "test_ce": ce,
            "rouge": rouge.to_dict(),
            "rouge_f1": rouge.f1s(),
            "kd_usage": kd_usage_stats(tr) if tr else None,
            "kd_class_report": kd_class_report(tr),
        }
    every = [t for tr in traces.values() for t in tr]
    return {
        "preset": cfg.preset,
        "strategy": cfg.strategy,
        "seed": cfg.seed,
        "rounds": cfg.rounds,
        "config_hash": chash.hex(),
        "payload_values": payload_size(cfg.model()),
        "bytes_per_transfer": payload_size(cfg.model()) * 4,
        "clients": per_client,
        "kd_usage": kd_usage_stats(every) if every else None,
        "kd_class_report": kd_class_report(every),
    }


# ---------------------------------------------------------------- data dump

def make_data(cfg: RunConfig, out: Path) -> list[Path]:
    vocab = build_vocab(cfg.vocab_size, cfg.content_fraction, cfg.backbone_seed)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for d in make_setting(vocab, cfg.preset, cfg.seed, scale=cfg.scale, skew=cfg.skew):
        for split in ("train", "valid", "test"):
            p = out / f"{d.name}.{split}.jsonl"
            write_jsonl(getattr(d, split), p)
            written.append(p)
    (out / "vocab.json").write_text(json.dumps({"tokens": list(vocab.tokens),
                                                "classes": [vocab.token_class(i) for i in range(vocab.size)]},
                                               indent=1) + "\n")
    return written


# ---------------------------------------------------------------- traces export

def export_traces(run_dir: Path, client: str | None = None):
    """Yield TokenTrace records of a finished run."""
    run_dir = Path(run_dir)
    path = run_dir / TRACES
    if not path.exists():
        raise RunError(f"{run_dir}: no {TRACES}; the run was executed with save_traces disabled")
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            if client is None or rec["client"] == client:
                yield rec


# ---------------------------------------------------------------- compare

def load_report(run_dir: Path) -> tuple[dict, dict]:
    run_dir = Path(run_dir)
    rp = run_dir / REPORT
    if not rp.exists():
        raise RunError(f"{run_dir}: missing {REPORT}")
    report = json.loads(rp.read_text())
    cp = run_dir / RESOLVED
    cfg = json.loads(cp.read_text()) if cp.exists() else {}
    return report, cfg


def _row(report: dict) -> dict[str, dict[str, float]]:
    rows = {}
    for cid, c in report["clients"].items():
        rows[cid] = {"test_ce": c["test_ce"], **c["rouge_f1"],
                     "kd_fraction": c["kd_usage"]["overall"] if c["kd_usage"] else 0.0}
    return rows


def compare(run_dirs: Sequence[Path]) -> dict:
    """Side-by-side per-client metrics, deltas against the first run, and seed groups."""
    if len(run_dirs) < 2:
        raise RunError("compare needs at least two run directories")
    loaded = [(Path(d), *load_report(d)) for d in run_dirs]
    warnings = []
    presets = {r["preset"] for _, r, _ in loaded}
    if len(presets) > 1:
        warnings.append(f"runs use different presets ({', '.join(sorted(presets))}); deltas are not comparable")
    runs = [{"dir": str(d), "strategy": r["strategy"], "preset": r["preset"], "seed": r["seed"],
             "clients": _row(r)} for d, r, _ in loaded]
    base = runs[0]["clients"]
    for run in runs:
        run["delta"] = {cid: {k: v - base[cid][k] for k, v in m.items()}
                        for cid, m in run["clients"].items() if cid in base}

    groups: dict[str, list[int]] = {}
    for i, (_, _, cfg) in enumerate(loaded):
        key = _dumps({k: v for k, v in cfg.items() if k not in ("seed", "output_dir", "workers",
                                                               "cache_dir", "save_traces")})
        groups.setdefault(key, []).append(i)
    summary = []
    for idx in groups.values():
        if len(idx) < 2:
            continue
        members = [runs[i] for i in idx]
        stats = {}
        for cid in members[0]["clients"]:
            stats[cid] = {}
            for k in members[0]["clients"][cid]:
                vals = np.array([m["clients"][cid][k] for m in members if cid in m["clients"]])
                stats[cid][k] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=0)), "n": len(vals)}
        summary.append({"strategy": members[0]["strategy"], "preset": members[0]["preset"],
                        "seeds": [m["seed"] for m in members], "clients": stats})
    return {"runs": runs, "seed_groups": summary, "warnings": warnings}


def format_compare(result: dict) -> str:
    lines = []
    keys = ("test_ce", "rouge1", "rouge2", "rougeL", "kd_fraction")
    head = f"{'run':<28} {'client':<12}" + "".join(f"{k:>12}" for k in keys)
    lines.append(head)
    for run in result["runs"]:
        name = f"{run['strategy']}/s{run['seed']}"
        for cid, m in run["clients"].items():
            lines.append(f"{name:<28} {cid:<12}" + "".join(f"{m[k]:>12.4f}" for k in keys))
            d = run["delta"].get(cid)
            if d is not None and run is not result["runs"][0]:
                lines.append(f"{'  delta':<28} {'':<12}" + "".join(f"{d[k]:>+12.4f}" for k in keys))
    for g in result["seed_groups"]:
        lines.append("")
        lines.append(f"{g['strategy']} on {g['preset']}, seeds {g['seeds']} (mean +- std)")
        for cid, s in g["clients"].items():
            lines.append(f"  {cid:<12}" + "".join(
                f"  {k}={s[k]['mean']:.4f}+-{s[k]['std']:.4f}" for k in keys))
    for w in result["warnings"]:
        lines.append(f"warning: {w}")
    return "\n".join(lines)
