"""Command line entry point: run, verify, sweep, oracle, plot-data."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

from .algorithms import ALGORITHMS, parse_options
from .harness import (
    ContractViolation,
    DegenerateSchedule,
    RunConfig,
    SUMMARY_COLUMNS,
    emit_plot_data,
    read_csv,
    run,
    sweep,
    verify,
    write_csv,
)
from .offline import (
    BudgetExceeded,
    ExplicitTree,
    OptInstance,
    adv_cost,
    brute_force_opt,
    opt_for_trace,
    validate_bounds,
)
from .rational import fmt
from .trace import TraceError, dumps
from .tree import MetricTree, parse_node

log = logging.getLogger("hkserver")

# flag dest -> RunConfig field (identical unless listed)
_RENAME = {"opt": "algorithm_options"}
_INT_FIELDS = {"h", "depth", "override_b", "max_requests", "max_phases", "max_epochs", "seed"}


def load_config_file(path) -> dict:
    """JSON object, or flat ``key = value`` lines (``#`` comments)."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        data = json.loads(text)
    else:
        data = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            data[key.strip()] = value.strip()
    out = {}
    for key, value in data.items():
        key = key.replace("-", "_")
        key = _RENAME.get(key, key)
        if key == "algorithm_options" and isinstance(value, str):
            value = parse_options(value.split(","))
        elif key == "algorithm_options" and isinstance(value, list):
            value = parse_options(value)
        out[key] = value
    return out


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or key=value file; flags given here override it")
    p.add_argument("--mode", choices=["lemma", "theorem", "infinite"])
    p.add_argument("--rho", help="target ratio (decimal or p/q)")
    p.add_argument("--h", type=int, help="offline server count (theorem mode)")
    p.add_argument("--depth", type=int)
    p.add_argument("--algorithm", choices=sorted(ALGORITHMS))
    p.add_argument("--opt", action="append", metavar="KEY=VALUE", help="algorithm option (repeatable)")
    p.add_argument("--epsilon")
    p.add_argument("--scale")
    p.add_argument("--override-b", type=int)
    p.add_argument("--override-k")
    p.add_argument("--k", help="online mass in theorem/infinite mode")
    p.add_argument("--max-requests", type=int)
    p.add_argument("--max-cost")
    p.add_argument("--max-phases", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--seed", type=int)


def config_from_args(args) -> RunConfig:
    values = load_config_file(args.config) if getattr(args, "config", None) else {}
    names = {f.name for f in fields(RunConfig)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for f in fields(RunConfig):
        flag = "opt" if f.name == "algorithm_options" else f.name
        v = getattr(args, flag, None)
        if v is None:
            continue
        if f.name == "algorithm_options":
            v = {**values.get("algorithm_options", {}), **parse_options(v)}
        values[f.name] = v
    for key in _INT_FIELDS & set(values):
        if values[key] is not None:
            values[key] = int(values[key])
    for key in ("rho", "epsilon", "scale", "override_k", "k", "max_cost"):
        if values.get(key) is not None:
            values[key] = str(values[key])
    return RunConfig(**values)


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    try:
        res = run(cfg)
    except DegenerateSchedule as exc:
        log.error("%s", exc)
        return 2
    except ContractViolation as exc:
        log.error("contract violation: %s (trace kept at %s)", exc, cfg.trace)
        return 3
    write_csv([res.summary.row()], sys.stdout, SUMMARY_COLUMNS)
    return 0


def cmd_verify(args) -> int:
    rep = verify(args.trace, replay=not args.no_replay)
    for line in rep.lines():
        print(dumps(line))
    if args.bounds_out and rep.bounds is not None:
        _write_bounds(args.bounds_out, rep, args.stride)
    if rep.violations["parse"]:
        return 2
    return 0 if rep.ok else 1


def _write_bounds(prefix, rep, stride) -> None:
    b = rep.bounds
    with open(prefix + ".jsonl", "w", encoding="utf-8") as fh:
        fh.write(dumps({"type": "slack", "rho": fmt(b.rho),
                        "cap": fmt(b.slack_cap) if b.slack_cap is not None else None,
                        "max": fmt(b.max_slack) if b.max_slack is not None else None,
                        "boundary": b.boundary, "violations": b.prefix_violations[:20]}) + "\n")
        for p, alg, adv, holds in b.phase_rows:
            fh.write(dumps({"type": "phase", "phase": p, "alg": fmt(alg), "adv": fmt(adv), "holds": holds}) + "\n")
        for row in b.epoch_rows:
            out = {k: (fmt(v) if v is not None and not isinstance(v, (bool, int)) else v) for k, v in row.items()}
            fh.write(dumps({"type": "epoch", **out}) + "\n")
        for m, o, a, holds in b.opt_rows:
            fh.write(dumps({"type": "opt", "m": m, "opt": fmt(o), "adv": fmt(a), "holds": holds}) + "\n")
    rows = []
    for m, alg, adv, opt, ratio in b.ratio_rows(rep.adv, stride):
        rows.append({"prefix_m": m, "alg_cost": fmt(alg), "adv_cost": fmt(adv),
                     "opt_cost": fmt(opt) if opt is not None else "",
                     "ratio": fmt(ratio) if ratio is not None else ""})
    write_csv(rows, prefix + ".csv", ["prefix_m", "alg_cost", "adv_cost", "opt_cost", "ratio"])


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()] if text else []


def _str_list(text):
    return [x.strip() for x in text.split(",") if x.strip()] if text else []


def cmd_sweep(args) -> int:
    base = config_from_args(args)
    grid = {}
    for key, conv in (("depth", _int_list), ("b", _int_list), ("algorithm", _str_list), ("epsilon", _str_list)):
        v = getattr(args, "grid_" + key)
        if v is not None:
            grid[key] = conv(v)
    rows = sweep(grid, base, out_csv=args.out or sys.stdout, jobs=args.jobs, trace_dir=args.trace_dir)
    failed = [r for r in rows if r["error"]]
    for r in failed:
        log.warning("cell %s/%s/%s failed: %s", r["depth"], r["b"], r["algorithm"], r["error"])
    return 0


def cmd_oracle(args) -> int:
    try:
        if args.trace:
            m, opt = opt_for_trace(args.trace, max_requests=args.max_requests)
            out = {"requests": m, "opt": fmt(opt)}
            if args.compare_adv:
                adv = adv_cost(args.trace)
                out["adv"] = fmt(adv.prefix_cost(m))
        else:
            if not args.request:
                raise ValueError("give --trace or at least one --request")
            seq = [parse_node(r) for r in args.request]
            mt = MetricTree(args.depth, args.scale_q)
            for node in seq:
                mt.validate(node)
            tree = ExplicitTree.from_paths(mt, seq)
            opt = brute_force_opt(OptInstance(tree, seq, args.servers))
            out = {"requests": len(seq), "opt": fmt(opt)}
    except BudgetExceeded as exc:
        log.error("budget exceeded: %s", exc)
        return 2
    print(dumps(out))
    return 0


def cmd_plot_data(args) -> int:
    rows = []
    for path in args.summaries:
        rows.extend(read_csv(path))
    paths = emit_plot_data(rows, args.out_dir, x=args.x, log_x=args.log_x)
    for name, path in paths.items():
        print(f"{name}\t{path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hkserver", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="play the adversary against one algorithm")
    _add_run_flags(p)
    p.add_argument("--trace", help="trace output (.jsonl or .jsonl.gz)")
    p.add_argument("--summary", help="summary JSON output")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="re-check every invariant on a trace")
    p.add_argument("trace")
    p.add_argument("--no-replay", action="store_true", help="skip the determinism re-run")
    p.add_argument("--bounds-out", metavar="PREFIX", help="write PREFIX.jsonl and PREFIX.csv")
    p.add_argument("--stride", type=int, default=1, help="ratio table row spacing")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="grid of runs, one CSV row per cell")
    _add_run_flags(p)
    p.add_argument("--grid-depth", help="comma list")
    p.add_argument("--grid-b", help="comma list of b overrides")
    p.add_argument("--grid-algorithm", help="comma list")
    p.add_argument("--grid-epsilon", help="comma list")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--trace-dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle", help="exact offline optimum on a tiny instance")
    p.add_argument("--trace", help="take the first requests of this trace")
    p.add_argument("--max-requests", type=int, default=12)
    p.add_argument("--compare-adv", action="store_true")
    p.add_argument("--request", action="append", help="node path, e.g. 0/1 (repeatable)")
    p.add_argument("--servers", type=int, default=1, help="offline servers h")
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--scale", dest="scale_text", default="1/4")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("plot-data", help="per-series data files from summary CSVs")
    p.add_argument("summaries", nargs="+")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--x", choices=["depth", "h"], default="depth")
    p.add_argument("--log-x", action="store_true", help="add an ln ln h column for h series")
    p.set_defaults(func=cmd_plot_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if getattr(args, "scale_text", None) is not None:
        from .rational import parse

        args.scale_q = parse(args.scale_text)
    try:
        return args.func(args)
    except (ValueError, TraceError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
