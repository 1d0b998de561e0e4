"""Command line entry point: ``fedselectkd run|compare|export-traces|make-data``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from pydantic import ValidationError

from .config import RunConfig
from .runner import ResumeError, RunError, compare, export_traces, format_compare, make_data, run_training

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SEED_ENV = "FSKD_SEED"

log = logging.getLogger("fedselectkd")


class ConfigError(ValueError):
    pass


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def resolve_config(args) -> RunConfig:
    """Config file, then the seed environment variable, then explicit flags."""
    data: dict = {}
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: invalid JSON ({e})")
        if not isinstance(data, dict):
            raise ConfigError(f"{args.config}: expected a flat JSON object")
    if data.get("tau") == "inf":
        data["tau"] = float("inf")
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            data["seed"] = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}")
    for key in ("preset", "strategy", "seed", "rounds", "scale", "skew"):
        v = getattr(args, key, None)
        if v is not None:
            data[key] = v
    if getattr(args, "out", None):
        data["output_dir"] = str(args.out)
    data.update(_parse_set(getattr(args, "set", None)))
    return RunConfig(**data)


def _format_validation(e: ValidationError) -> str:
    lines = ["invalid configuration:"]
    for err in e.errors():
        field = ".".join(str(x) for x in err["loc"]) or "(config)"
        lines.append(f"  {field}: {err['msg']}")
    return "\n".join(lines)


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", nargs="?", help="flat JSON config file")
    p.add_argument("--preset")
    p.add_argument("--strategy")
    p.add_argument("--seed", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--scale", type=float)
    p.add_argument("--skew", type=float)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedselectkd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="run one federated experiment")
    _config_args(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--resume", action="store_true", help="continue an interrupted run in --out")

    p = sub.add_parser("compare", help="side-by-side table of finished runs")
    p.add_argument("runs", nargs="+", type=Path)
    p.add_argument("--json", type=Path, help="also write the machine-readable table here")

    p = sub.add_parser("export-traces", help="dump token-learning events of a run")
    p.add_argument("run", type=Path)
    p.add_argument("--client")
    p.add_argument("--out", type=Path, help="output file (default stdout)")

    p = sub.add_parser("make-data", help="write a preset's client datasets as JSONL")
    _config_args(p)
    p.add_argument("--out", required=True, type=Path)
    return parser


def _cmd_run(args) -> int:
    cfg = resolve_config(args)
    result = run_training(cfg, resume=args.resume)
    for cid, c in result.report["clients"].items():
        print(f"{cid:<12} test_ce={c['test_ce']:.4f}  R1={c['rouge_f1']['rouge1']:.4f}  "
              f"RL={c['rouge_f1']['rougeL']:.4f}  best_round={c['best_round']}")
    usage = result.report["kd_usage"]
    if usage:
        print(f"kd fraction {usage['overall']:.4f} over {usage['events']} token events")
    print(f"artifacts in {result.out}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    result = compare(args.runs)
    print(format_compare(result))
    for w in result["warnings"]:
        log.warning(w)
    if args.json:
        args.json.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _cmd_export(args) -> int:
    stream = open(args.out, "w") if args.out else sys.stdout
    try:
        n = 0
        for rec in export_traces(args.run, args.client):
            stream.write(json.dumps(rec, sort_keys=True) + "\n")
            n += 1
    finally:
        if args.out:
            stream.close()
    log.info("exported %d trace records", n)
    return EXIT_OK


def _cmd_make_data(args) -> int:
    cfg = resolve_config(args)
    paths = make_data(cfg, args.out)
    print(f"wrote {len(paths)} files to {args.out}")
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "compare": _cmd_compare, "export-traces": _cmd_export, "make-data": _cmd_make_data}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except ValidationError as e:
        print(_format_validation(e), file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, ResumeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunError, OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
