"""Command-line front end.

Subcommands map onto pipeline stages and exchange canonical JSON artifacts
through the output directory::

    embedexp summarize --config study.toml
    embedexp design    --config study.toml
    embedexp balance   --config study.toml
    embedexp lock      --config study.toml
    embedexp analyze   --config study.toml
    embedexp run       --config study.toml   # all of the above

Exit codes: 0 success, 2 usage or config, 3 data, 4 numeric, 5 blinding violation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ._canon import canonical_json, to_jsonable
from .dataset import DesignLock, load_csv, summarize
from .design import DesignResult
from .errors import BlindingViolationError, ConfigurationError, DataError, EmbedExpError, UsageError
from .protocol import (
    OUT_ENV,
    ProtocolConfig,
    build_design,
    load_data,
    make_lock,
    run_analyses,
    run_balance,
    run_protocol,
    write_balance_outputs,
    write_design_outputs,
    write_inference_outputs,
    write_text,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="protocol file (TOML)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--draws", type=int, help="overrides the config Monte-Carlo draw count")
    common.add_argument("--out", type=Path, help=f"output directory (default: config 'out', then ${OUT_ENV})")
    common.add_argument("--threads", type=int, help="worker threads for Monte-Carlo loops")

    p = _Parser(prog="embedexp", description="Design-first causal analysis of observational data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    s = sub.add_parser("summarize", parents=[common], help="covariate summary of the blinded data")
    s.add_argument("--data", type=Path, help="CSV to summarize instead of the config's data file")
    sub.add_parser("design", parents=[common], help="build the design on blinded data")
    for name, text in (("balance", "balance report for the saved design"), ("lock", "freeze design and protocol")):
        q = sub.add_parser(name, parents=[common], help=text)
        q.add_argument("--design", type=Path, help="design file (default: OUT/design.json)")
    q = sub.add_parser("analyze", parents=[common], help="unseal outcomes under the lock and analyze")
    q.add_argument("--design", type=Path, help="design file (default: OUT/design.json)")
    q.add_argument("--lock", type=Path, help="lock file (default: OUT/lock.json)")
    sub.add_parser("run", parents=[common], help="every stage in order")
    return p


def _config(args) -> ProtocolConfig:
    if args.config is None:
        raise UsageError(f"{args.command} needs --config")
    return ProtocolConfig.from_file(
        args.config, seed=args.seed, draws=args.draws, out=args.out, threads=args.threads
    )


def _read_json(path: Path, what: str, missing_error=DataError) -> dict:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise missing_error(f"{what} file not found: {path}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc.msg})") from None


def _load_design(args, cfg: ProtocolConfig, locked: bool = False) -> DesignResult:
    path = args.design or cfg.out / "design.json"
    doc = _read_json(path, "design")
    try:
        return DesignResult.from_dict(doc)
    except (KeyError, TypeError, ValueError, ConfigurationError) as exc:
        if locked:
            # a design that no longer parses after locking was edited
            raise BlindingViolationError(f"{path}: design does not match the lock ({exc})") from None
        raise DataError(f"{path}: malformed design ({exc})") from None


def _cmd_summarize(args) -> dict:
    if args.data is not None:
        ds = load_csv(args.data)
        out = args.out
    else:
        cfg = _config(args)
        ds, out = load_data(cfg), cfg.out
    doc = to_jsonable({"n": len(ds), "treated_fraction": float(ds.treatment.mean()), **summarize(ds).to_dict()})
    if out is not None:
        write_text(Path(out) / "summary.json", canonical_json(doc) + "\n")
    return doc


def _cmd_design(args) -> dict:
    cfg = _config(args)
    ds = load_data(cfg)
    return write_design_outputs(cfg.out, ds, build_design(cfg, ds))


def _cmd_balance(args) -> dict:
    cfg = _config(args)
    ds = load_data(cfg)
    report = run_balance(cfg, ds, _load_design(args, cfg))
    write_balance_outputs(cfg.out, report)
    return {"design_method": report.design_method, "verdict": report.verdict.to_dict()}


def _cmd_lock(args) -> dict:
    cfg = _config(args)
    ds = load_data(cfg)
    lock = make_lock(cfg, ds, _load_design(args, cfg))
    write_text(cfg.out / "lock.json", canonical_json(lock.to_dict()) + "\n")
    return {"design_id": lock.design_id, "content_hash": lock.content_hash}


def _cmd_analyze(args) -> dict:
    cfg = _config(args)
    ds = load_data(cfg)
    design = _load_design(args, cfg, locked=True)
    lock_doc = _read_json(args.lock or cfg.out / "lock.json", "lock", BlindingViolationError)
    try:
        lock = DesignLock.from_dict(lock_doc)
    except (KeyError, TypeError) as exc:
        raise BlindingViolationError(f"lock file is malformed ({exc})") from None
    results = run_analyses(cfg, ds, design, lock)
    write_inference_outputs(cfg.out, results)
    return {"lock_hash": lock.content_hash, "results": [r.to_dict() for r in results]}


def _cmd_run(args) -> dict:
    bundle = run_protocol(_config(args))
    return {"out": str(bundle.out), "lock_hash": bundle.lock.content_hash, "results": [r.to_dict() for r in bundle.results]}


COMMANDS = {
    "summarize": _cmd_summarize,
    "design": _cmd_design,
    "balance": _cmd_balance,
    "lock": _cmd_lock,
    "analyze": _cmd_analyze,
    "run": _cmd_run,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        doc = COMMANDS[args.command](args)
    except EmbedExpError as exc:
        print(f"embedexp: error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps(to_jsonable(doc), indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
