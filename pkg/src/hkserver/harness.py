"""Experiment orchestration: run, verify, sweep and plot-data export."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import mpmath
from gmpy2 import mpq

from .adversary import (
    EpochAdversary,
    lemma_adversary,
    marking_candidate_bound,
    phase_cost_lower_bound,
)
from .algorithms import make_algorithm
from .mass import (
    CostLedger,
    MassConfig,
    TransferError,
    apply_transfers,
    check_transfer,
    charge_transfer,
    down_crossings,
    initial_config,
)
from .offline import adv_cost, certified_rho, opt_for_trace, validate_bounds
from .rational import ONE, ZERO, fmt, parse, q
from .trace import (
    SCHEMA,
    TraceError,
    TraceWriter,
    decode_levels,
    decode_transfers,
    encode_levels,
    encode_transfers,
    has_torn_tail,
    open_text,
    params_record,
    read_records,
    setup_from_header,
)
from .tree import (
    ConstructionParams,
    MetricTree,
    derive_params,
    k_value,
    node_str,
    parse_node,
    schedule_rho,
    theorem_schedule,
)

log = logging.getLogger(__name__)

MODES = ("lemma", "theorem", "infinite")
INFINITE_K = 10**6


class DegenerateSchedule(ValueError):
    pass


class ContractViolation(RuntimeError):
    pass


@dataclass
class RunConfig:
    mode: str = "lemma"
    rho: str | None = None
    h: int | None = None
    depth: int | None = None
    algorithm: str = "greedy"
    algorithm_options: dict = field(default_factory=dict)
    epsilon: str | None = None
    scale: str | None = None
    override_b: int | None = None
    override_k: str | None = None
    k: str | None = None  # online mass in theorem / infinite mode
    max_requests: int = 100_000
    max_cost: str | None = None
    max_phases: int | None = None
    max_epochs: int | None = None
    seed: int = 0
    trace: str | None = None
    summary: str | None = None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode == "theorem":
            if self.h is None:
                raise ValueError("theorem mode needs h")
        elif self.mode == "lemma":
            if self.depth is None:
                raise ValueError("lemma mode needs depth")
            if self.rho is None and self.override_b is None:
                raise ValueError("lemma mode needs rho or an override for b")
        elif self.mode == "infinite":
            if self.depth is None or self.depth < 1:
                raise ValueError("infinite mode needs depth >= 1")
            if self.rho is None and self.override_b is None:
                raise ValueError("infinite mode needs rho or an override for b")
        if self.max_requests is None or self.max_requests <= 0:
            raise ValueError("max_requests must be > 0")
        if self.max_cost is not None and q(self.max_cost) <= 0:
            raise ValueError("max_cost must be > 0")

    def to_record(self) -> dict:
        rec = {}
        for f in fields(self):
            if f.name in ("trace", "summary"):
                continue
            v = getattr(self, f.name)
            rec[f.name] = dict(sorted(v.items())) if isinstance(v, dict) else v
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in rec.items() if k in names})


@dataclass
class RunSummary:
    mode: str
    depth: int
    b: int
    h: int
    k: mpq
    epsilon: mpq
    algorithm: str
    requests: int
    alg_cost: mpq
    adv_cost: mpq
    opt_cost: mpq | None
    ratio: mpq | None
    offset: mpq
    complete_phases: int
    complete_epochs: int
    budget_hit: bool
    stop_reason: str = ""
    warnings: list = field(default_factory=list)

    @property
    def empirical_ratio(self):
        return self.ratio

    @property
    def additive_offset(self):
        return self.offset

    @property
    def request_count(self):
        return self.requests

    def row(self) -> dict:
        def s(v):
            if v is None:
                return ""
            if isinstance(v, bool):
                return "1" if v else "0"
            if isinstance(v, (int, str)):
                return str(v)
            return fmt(v)

        return {c: s(getattr(self, c)) for c in SUMMARY_COLUMNS}

    def to_json(self) -> dict:
        out = self.row()
        out["stop_reason"] = self.stop_reason
        out["warnings"] = list(self.warnings)
        return out


SUMMARY_COLUMNS = [
    "mode",
    "depth",
    "b",
    "h",
    "k",
    "epsilon",
    "algorithm",
    "requests",
    "alg_cost",
    "adv_cost",
    "opt_cost",
    "ratio",
    "offset",
    "complete_phases",
    "complete_epochs",
    "budget_hit",
]


@dataclass
class RunSetup:
    params: ConstructionParams
    tree: MetricTree
    k_online: mpq
    adv_servers: int
    warnings: list


def build_setup(cfg: RunConfig) -> RunSetup:
    cfg.validate()
    warnings = []
    overrides = {"epsilon": cfg.epsilon, "scale": cfg.scale}
    if cfg.mode == "lemma":
        overrides.update(b=cfg.override_b, k=cfg.override_k)
        rho = cfg.rho if cfg.rho is not None else schedule_rho(cfg.override_b)
        params = derive_params(rho, cfg.depth, overrides)
        if not params.paper_schedule:
            warnings.append("non-paper schedule: guarantees are not asserted for this run")
        return RunSetup(params, params.tree(), params.k, params.h, warnings)

    if cfg.mode == "theorem":
        sched = theorem_schedule(int(cfg.h))
        if sched.degenerate and cfg.override_b is None:
            raise DegenerateSchedule(
                f"theorem schedule for h={cfg.h} is degenerate (i_h={sched.i_h}, b={sched.b}); "
                "pass an override for b"
            )
        if sched.degenerate:
            warnings.append(f"degenerate schedule (b={sched.b}) overridden with b={cfg.override_b}")
        b = int(cfg.override_b) if cfg.override_b is not None else sched.b
        i = int(cfg.depth) if cfg.depth is not None else sched.i_h
        if i < 1:
            raise DegenerateSchedule(f"theorem schedule for h={cfg.h} has i_h=0")
        rho = cfg.rho if cfg.rho not in (None, "certified") else schedule_rho(b)
        overrides.update(b=b)
        params = derive_params(rho, i, overrides)
        if cfg.rho == "certified":
            params = params.with_(rho=certified_rho(params, i))
        if b**i > int(cfg.h):
            warnings.append(f"offline group b^i = {b ** i} exceeds h = {cfg.h}")
        k_online = q(cfg.k) if cfg.k is not None else mpq(2 * int(cfg.h))
        if k_online < int(cfg.h):
            raise ValueError("online mass k must be >= h")
        return RunSetup(params, MetricTree(i + 1, params.scale), k_online, int(cfg.h), warnings)

    # infinite
    overrides.update(b=cfg.override_b)
    rho = cfg.rho if cfg.rho is not None else schedule_rho(cfg.override_b)
    params = derive_params(rho, cfg.depth, overrides)
    k_online = q(cfg.k) if cfg.k is not None else mpq(INFINITE_K)
    # the offline side also has unboundedly many servers at the root
    adv_servers = 10**18
    return RunSetup(params, MetricTree(cfg.depth + 1, params.scale), k_online, adv_servers, warnings)


def _constants(params: ConstructionParams, cfg: RunConfig) -> dict:
    # informational only; every authoritative value is exact
    with mpmath.workdps(40):
        rho = mpmath.mpf(int(params.rho.numerator)) / int(params.rho.denominator)
        out = {
            "note": "non-authoritative, 30 significant digits",
            "exp_3rho": mpmath.nstr(mpmath.exp(3 * rho), 30),
            "ln_b_over_3": mpmath.nstr(mpmath.log(params.b) / 3, 30),
        }
        if cfg.h is not None:
            out["sqrt_ln_h"] = mpmath.nstr(mpmath.sqrt(mpmath.log(int(cfg.h))), 30)
    return out


def _make_adversary(cfg: RunConfig, setup: RunSetup, emit):
    if cfg.mode == "lemma":
        return lemma_adversary(setup.params, emit)
    return EpochAdversary(setup.params, emit)


@dataclass
class RunResult:
    summary: RunSummary
    trace: str | None
    records: list | None = None


def run(cfg: RunConfig, keep_records: bool = False, quiet: bool = False) -> RunResult:
    """Play the adversary against the algorithm until a budget or target is hit.

    The trace is written to ``cfg.trace`` (if set); with ``keep_records`` it
    is also returned in memory.  A contract violation persists the trace up
    to the failure and then raises :class:`ContractViolation`.
    """
    setup = build_setup(cfg)
    params, tree = setup.params, setup.tree
    algorithm = make_algorithm(cfg.algorithm, tree, cfg.algorithm_options)
    records = [] if keep_records else None
    writer = TraceWriter(cfg.trace)

    def write(rec):
        writer.write(rec)
        if records is not None:
            records.append(rec)

    counters = {"phases": 0, "epochs": 0}
    top_owner = "" if cfg.mode == "lemma" else None

    def emit(event):
        t = event["type"]
        if t == "phase_complete" and event["owner"] == top_owner:
            counters["phases"] += 1
        elif t == "epoch_complete":
            counters["epochs"] += 1
        write(event)

    config = initial_config(setup.k_online)
    ledger = CostLedger()
    max_cost = q(cfg.max_cost) if cfg.max_cost is not None else None
    header = {
        "type": "header",
        "schema": SCHEMA,
        "config": cfg.to_record(),
        "params": params_record(params, tree.depth, setup.k_online, setup.adv_servers),
        "algorithm_options": {k: str(v) for k, v in sorted(algorithm.options().items())},
        "constants": _constants(params, cfg),
        "warnings": setup.warnings,
    }
    write(header)
    if not quiet:
        for w in setup.warnings:
            log.warning(w)
    adversary = _make_adversary(cfg, setup, emit)
    n = 0
    stop_reason = ""
    budget_hit = False
    violation = None
    try:
        while True:
            if cfg.max_phases is not None and counters["phases"] >= cfg.max_phases:
                stop_reason = "max_phases"
                break
            if cfg.max_epochs is not None and counters["epochs"] >= cfg.max_epochs:
                stop_reason = "max_epochs"
                break
            if n >= cfg.max_requests:
                stop_reason, budget_hit = "max_requests", True
                break
            if max_cost is not None and ledger.down_total >= max_cost:
                stop_reason, budget_hit = "max_cost", True
                break
            request = adversary.next_request(config)
            if cfg.max_phases is not None and counters["phases"] >= cfg.max_phases:
                stop_reason = "max_phases"
                break
            if cfg.max_epochs is not None and counters["epochs"] >= cfg.max_epochs:
                stop_reason = "max_epochs"
                break
            decision = algorithm.serve(config, request)
            transfers = decision.transfers
            try:
                delta = apply_transfers(config, transfers, ledger, tree)
            except TransferError as exc:
                violation = f"request {n}: infeasible transfer list: {exc}"
                break
            if config[request] < ONE:
                violation = f"request {n}: {node_str(request)!r} left with mass {config[request]}"
                break
            touched = {}
            for t in transfers:
                touched[t.src] = None
                touched[t.dst] = None
            write(
                {
                    "type": "request",
                    "i": n,
                    "node": node_str(request),
                    "transfers": encode_transfers(transfers),
                    "down": encode_levels(delta.down_by_level),
                    "up": encode_levels(delta.up_by_level),
                    "post": {node_str(x): fmt(config[x]) for x in touched},
                }
            )
            n += 1
    finally:
        if violation is not None:
            write({"type": "violation", "i": n, "message": violation})
        elif stop_reason in ("max_requests", "max_cost"):
            write({"type": "stalled_budget", "reason": stop_reason, "requests": n})
        else:
            write({"type": "stop", "reason": stop_reason, "requests": n})
        write(
            {
                "type": "footer",
                "requests": n,
                "down_total": fmt(ledger.down_total),
                "up_total": fmt(ledger.up_total),
                "down_by_level": encode_levels(ledger.down_by_level),
                "up_by_level": encode_levels(ledger.up_by_level),
                "complete_phases": counters["phases"],
                "complete_epochs": counters["epochs"],
            }
        )
        writer.close()
    if violation is not None:
        raise ContractViolation(violation)

    source = records if records is not None else cfg.trace
    summary = summarize(source, cfg, setup, n, ledger, counters, budget_hit, stop_reason)
    if cfg.summary:
        import json

        with open(cfg.summary, "w", encoding="utf-8") as fh:
            json.dump(summary.to_json(), fh, indent=1)
            fh.write("\n")
    return RunResult(summary, cfg.trace, records)


def summarize(source, cfg, setup, n, ledger, counters, budget_hit, stop_reason) -> RunSummary:
    params = setup.params
    alg_cost = ledger.down_total
    if source is None:
        adv_total, offset = None, ZERO
    else:
        adv = adv_cost(source)
        adv_total = adv.total
        alg = ZERO
        offset = None
        prefix_iter = _alg_prefix(source)
        for m, a in enumerate(prefix_iter):
            val = params.rho * adv.prefix[m] - a
            offset = val if offset is None else max(offset, val)
        if offset is None:
            offset = params.rho * adv.placement
    opt = None
    if source is not None and n and n <= 12 and setup.params.h <= 3:
        try:
            _, opt = opt_for_trace(source, max_requests=n)
        except Exception:  # budget exceeded on wider trees
            opt = None
    ratio = alg_cost / adv_total if adv_total else None
    return RunSummary(
        mode=cfg.mode,
        depth=params.depth,
        b=params.b,
        h=params.h if cfg.mode == "lemma" else int(cfg.h or setup.adv_servers),
        k=setup.k_online,
        epsilon=params.epsilon,
        algorithm=cfg.algorithm,
        requests=n,
        alg_cost=alg_cost,
        adv_cost=adv_total if adv_total is not None else ZERO,
        opt_cost=opt,
        ratio=ratio,
        offset=offset,
        complete_phases=counters["phases"],
        complete_epochs=counters["epochs"],
        budget_hit=budget_hit,
        stop_reason=stop_reason,
        warnings=list(setup.warnings),
    )


def _alg_prefix(source):
    records = source if isinstance(source, list) else read_records(source)
    alg = ZERO
    for rec in records:
        if rec.get("type") == "request":
            alg += sum((parse(v) for v in rec["down"].values()), ZERO)
            yield alg


# --- verification -------------------------------------------------------------


CHECKS = (
    "parse",
    "conservation",
    "ledger",
    "served",
    "dominance",
    "freshness",
    "pigeonhole",
    "phase_cost",
    "marking",
    "epoch",
    "adv_feasibility",
    "adv_phase_cost",
    "property_a",
    "phase_chain",
    "opt",
    "footer",
    "determinism",
)


@dataclass
class VerifyReport:
    checked: dict = field(default_factory=lambda: {c: 0 for c in CHECKS})
    violations: dict = field(default_factory=lambda: {c: [] for c in CHECKS})
    notes: list = field(default_factory=list)
    bounds: object = None
    adv: object = None
    complete_phases: dict = field(default_factory=dict)
    phase_costs: list = field(default_factory=list)  # (owner, phase, cost, bound)

    def flag(self, check: str, where, message: str) -> None:
        self.violations[check].append({"at": where, "message": message})

    @property
    def ok(self) -> bool:
        return not any(self.violations.values())

    def count(self, check: str) -> int:
        return len(self.violations[check])

    def lines(self):
        for c in CHECKS:
            yield {
                "check": c,
                "checked": self.checked[c],
                "violations": len(self.violations[c]),
                "first": self.violations[c][:3],
            }
        for note in self.notes:
            yield {"note": note}


class _Inst:
    __slots__ = ("owner", "root", "height", "total", "phase", "marked", "prev", "dropped", "requested", "acc", "open")

    def __init__(self, owner, height, total):
        self.owner = owner
        self.root = parse_node(owner)
        self.height = height
        self.total = total
        self.phase = 0
        self.marked = []
        self.prev = []
        self.dropped = set()
        self.requested = set()
        self.acc = ZERO
        self.open = False


def verify(trace_path, replay: bool = True, opt_requests: int = 12) -> VerifyReport:
    """Re-check every invariant a trace is supposed to satisfy."""
    rep = VerifyReport()
    try:
        records = read_records(trace_path)
        first = next(records)
        setup = setup_from_header(first)
    except (TraceError, StopIteration, OSError) as exc:
        rep.flag("parse", 0, str(exc))
        return rep
    params, tree = setup.params, setup.tree
    cfg = initial_config(setup.k_online)
    ledger = CostLedger()
    recorded_down = ZERO
    recorded_up = ZERO
    insts: dict = {}
    epoch = None
    footer = None
    lines = 1
    requests = 0
    lengths = tree._lengths
    b = params.b
    try:
        for rec in records:
            lines += 1
            t = rec.get("type")
            if t == "request":
                requests += 1
                _verify_request(rep, rec, cfg, ledger, tree, insts, epoch, setup)
                recorded_down += sum((parse(v) for v in rec["down"].values()), ZERO)
                recorded_up += sum((parse(v) for v in rec["up"].values()), ZERO)
            elif t == "instance":
                insts[rec["owner"]] = _Inst(rec["owner"], int(rec["height"]), parse(rec["total"]))
                inst = insts[rec["owner"]]
                inst.marked = list(range(b))
            elif t == "phase_start":
                inst = insts[rec["owner"]]
                rep.checked["freshness"] += 1
                fresh = rec["fresh"]
                if fresh in inst.requested or fresh in inst.marked or fresh in inst.dropped:
                    rep.flag("freshness", lines, f"fresh child {fresh} of {rec['owner']!r} was used before")
                if rec["prev"] != inst.marked:
                    rep.flag("marking", lines, "previous marked set does not match")
                inst.prev = list(inst.marked)
                inst.marked = [fresh]
                inst.phase = rec["phase"]
                inst.acc = ZERO
                inst.open = True
            elif t == "mark":
                inst = insts[rec["owner"]]
                rep.checked["pigeonhole"] += 1
                c = rec["child"]
                cap = params.k_at(inst.height - 1)
                thr = cap - params.epsilon
                capped = min(cfg.subtree(inst.root + (c,)), cap)
                bound = marking_candidate_bound(inst.total, rec["j"], thr, b)
                if parse(rec["capped"]) != capped or parse(rec["bound"]) != bound:
                    rep.flag("pigeonhole", lines, "recorded capped mass or bound disagrees with replay")
                if not capped <= bound:
                    rep.flag("pigeonhole", lines, f"capped mass {capped} > bound {bound}")
                rep.checked["marking"] += 1
                cands = [x for x in inst.prev if x not in inst.marked]
                if c not in cands:
                    rep.flag("marking", lines, f"child {c} is not an unmarked carry-over")
                else:
                    least = min(cands, key=lambda x: (min(cfg.subtree(inst.root + (x,)), cap), x))
                    if least != c:
                        rep.flag("marking", lines, f"child {c} is not the least-mass candidate ({least})")
                inst.marked.append(c)
            elif t == "phase_complete":
                inst = insts[rec["owner"]]
                rep.checked["phase_cost"] += 1
                thr = params.k_at(inst.height - 1) - params.epsilon
                if rec["marked"] != inst.marked:
                    rep.flag("marking", lines, "completed marked set does not match")
                for c in inst.marked:
                    if not cfg.subtree(inst.root + (c,)) > thr:
                        rep.flag("marking", lines, f"phase closed with child {c} at or below threshold")
                dropped = [x for x in inst.prev if x not in inst.marked]
                if dropped != [rec["dropped"]]:
                    rep.flag("marking", lines, f"dropped {rec['dropped']} but expected {dropped}")
                lb, nonneg = phase_cost_lower_bound(inst.total, thr, b)
                need = lb * lengths[len(inst.root) + 1]
                rep.phase_costs.append((inst.owner, inst.phase, inst.acc, need, nonneg))
                if nonneg and not inst.acc >= need:
                    rep.flag(
                        "phase_cost", lines,
                        f"phase {inst.phase} of {inst.owner!r}: child-edge cost {inst.acc} < {need}",
                    )
                rep.complete_phases[inst.owner] = rep.complete_phases.get(inst.owner, 0) + 1
                inst.dropped.add(rec["dropped"])
                inst.open = False
            elif t == "epoch_start":
                rep.checked["epoch"] += 1
                idx = int(rec["subtree"])
                if cfg.subtree((idx,)) != 0:
                    rep.flag("epoch", lines, f"epoch subtree {idx} starts with online mass")
                if parse(rec["threshold"]) != k_value(b, params.depth):
                    rep.flag("epoch", lines, "epoch threshold disagrees with b^i(1+i/(2b))")
                epoch = idx
            elif t == "epoch_complete":
                rep.checked["epoch"] += 1
                m = cfg.subtree((int(rec["subtree"]),))
                if not m > k_value(b, params.depth) or parse(rec["mass"]) != m:
                    rep.flag("epoch", lines, "epoch closed without exceeding its threshold")
            elif t == "footer":
                footer = rec
            elif t == "violation":
                rep.notes.append(f"run aborted: {rec['message']}")
    except (TraceError, KeyError, ValueError, TypeError) as exc:
        rep.flag("parse", lines, f"unparseable record: {exc}")
        return rep

    rep.checked["conservation"] += 1
    if sum(cfg.mass.values(), ZERO) != setup.k_online:
        rep.flag("conservation", lines, "recomputed total mass differs from k")
    if has_torn_tail(trace_path):
        rep.notes.append("torn final record ignored")
    open_phases = [i for i in insts.values() if i.open]
    if open_phases:
        rep.notes.append(
            "incomplete final phase in " + ", ".join(repr(i.owner) for i in open_phases[:5])
            + (" ..." if len(open_phases) > 5 else "")
        )
    rep.checked["footer"] += 1
    if footer is None:
        rep.notes.append("no footer: truncated trace, prefix checks only")
    else:
        if parse(footer["down_total"]) != recorded_down or parse(footer["up_total"]) != recorded_up:
            rep.flag("footer", lines, "footer totals differ from the sum of record deltas")
        if footer["requests"] != requests:
            rep.flag("footer", lines, "footer request count differs")

    _verify_offline(rep, trace_path, setup, opt_requests)
    if replay:
        _verify_replay(rep, trace_path, setup, complete=footer is not None)
    return rep


def _verify_request(rep, rec, cfg: MassConfig, ledger, tree, insts, epoch, setup) -> None:
    i = rec["i"]
    node = parse_node(rec["node"])
    transfers = decode_transfers(rec["transfers"])
    delta = CostLedger()
    rep.checked["conservation"] += 1
    for j, t in enumerate(transfers):
        try:
            t = check_transfer(cfg, tree, t, j)
        except TransferError as exc:
            rep.flag("conservation", i, f"infeasible transfer: {exc}")
            # apply what is there so later records stay comparable
            src_has = cfg[t.src]
            if src_has > 0:
                cfg.move(t.src, t.dst, min(src_has, t.amount))
            continue
        cfg.move(t.src, t.dst, t.amount)
        charge_transfer(tree, t, delta)
        for parent, c, cost in down_crossings(tree, t):
            inst = insts.get(node_str(parent))
            if inst is not None and inst.open:
                inst.acc += cost
    post = rec.get("post", {})
    for s, v in post.items():
        if cfg[parse_node(s)] != parse(v):
            rep.flag("conservation", i, f"mass at {s!r} is {cfg[parse_node(s)]}, record says {v}")
            break
    # only transfer sources lose mass
    if cfg.total != setup.k_online or any(cfg[t.src] < 0 for t in transfers):
        rep.flag("conservation", i, "total mass changed or went negative")
    rep.checked["ledger"] += 1
    if decode_levels(rec["down"]) != delta.down_by_level or decode_levels(rec["up"]) != delta.up_by_level:
        rep.flag("ledger", i, "ledger delta differs from the transfers")
    ledger.absorb(delta)
    rep.checked["served"] += 1
    if cfg[node] < ONE:
        rep.flag("served", i, f"request {rec['node']!r} holds only {cfg[node]}")
    rep.checked["dominance"] += 1
    if ledger.up_total > ledger.down_total:
        rep.flag("dominance", i, "upward cost exceeds downward cost")
    # freshness: the request must sit in a marked, never-dropped child of every enclosing instance
    rep.checked["freshness"] += 1
    if epoch is not None and (not node or node[0] != epoch):
        rep.flag("freshness", i, f"request outside the active epoch subtree {epoch}")
    for p in range(len(node)):
        inst = insts.get(node_str(node[:p]))
        if inst is None:
            continue
        c = node[p]
        if c in inst.dropped:
            rep.flag("freshness", i, f"request into dropped child {c} of {inst.owner!r}")
        elif c not in inst.marked or not inst.open:
            rep.flag("freshness", i, f"request into unmarked child {c} of {inst.owner!r}")
        inst.requested.add(c)


def _verify_offline(rep: VerifyReport, trace_path, setup, opt_requests: int) -> None:
    try:
        adv = adv_cost(trace_path)
    except (TraceError, KeyError) as exc:
        rep.flag("parse", "adv", f"cannot rebuild the offline strategy: {exc}")
        return
    rep.adv = adv
    rep.checked["adv_feasibility"] += 1
    for idx, node in adv.infeasible:
        rep.flag("adv_feasibility", idx, f"offline strategy has no server at {node!r}")
    for key, got, need in adv.shortfalls:
        rep.flag("adv_feasibility", key, f"group move found {got} of {need} servers")
    for key in sorted(adv.complete):
        rep.checked["adv_phase_cost"] += 1
        if adv.phase_level.get(key) != adv.phase_expected.get(key):
            rep.flag(
                "adv_phase_cost", key,
                f"level cost {adv.phase_level.get(key)} != group size {adv.phase_expected.get(key)}",
            )
    opt = None
    n = len(adv.prefix)
    if setup.params.h <= 3 and n:
        try:
            m, o = opt_for_trace(trace_path, max_requests=min(n, opt_requests))
            opt = [(m, o)]
        except Exception as exc:  # budget
            rep.notes.append(f"OPT oracle skipped: {exc}")
    bounds = validate_bounds(trace_path, adv, opt)
    rep.bounds = bounds
    rep.notes.extend(bounds.notes)
    rep.checked["property_a"] += len(bounds.alg_prefix)
    for m in bounds.prefix_violations[:100]:
        rep.flag("property_a", m, f"rho*ADV - ALG exceeds stabilised slack {bounds.slack_cap}")
    rep.checked["phase_chain"] += len(bounds.phase_rows)
    if setup.params.paper_schedule:
        for p in bounds.phase_chain_violations:
            rep.flag("phase_chain", p, "complete phase with ALG < rho * ADV")
    elif bounds.phase_chain_violations:
        rep.notes.append(
            f"phase chain fails in {len(bounds.phase_chain_violations)} phases (non-paper schedule, informational)"
        )
    rep.checked["epoch"] += len(bounds.epoch_rows)
    for e in bounds.epoch_violations:
        rep.flag("epoch", e, "epoch ratio inequality fails")
    rep.checked["opt"] += len(bounds.opt_rows)
    for m in bounds.opt_violations:
        rep.flag("opt", m, "OPT exceeds the offline strategy")


def _verify_replay(rep: VerifyReport, trace_path, setup, complete: bool) -> None:
    rep.checked["determinism"] += 1
    cfg = RunConfig.from_record(setup.header["config"])
    suffix = ".jsonl.gz" if str(trace_path).endswith(".gz") else ".jsonl"
    fd, tmp = tempfile.mkstemp(suffix=suffix)
    os.close(fd)
    try:
        cfg = replace(cfg, trace=tmp, summary=None)
        try:
            run(cfg, quiet=True)
        except ContractViolation:
            pass
        with open_text(trace_path) as a, open_text(tmp) as b:
            if complete:
                same = a.read() == b.read()
            else:
                same = True
                for line in a:
                    if not line.endswith("\n"):
                        break  # torn last line of a truncated file
                    if line != b.readline():
                        same = False
                        break
        if not same:
            rep.flag("determinism", str(trace_path), "re-running the header config gives a different trace")
    finally:
        os.unlink(tmp)


# --- sweeps and plot data ------------------------------------------------------


def _sweep_cell(args):
    cfg = args
    try:
        res = run(cfg, quiet=True)
        return res.summary.row(), None
    except Exception as exc:  # recorded per cell, the sweep continues
        return None, f"{type(exc).__name__}: {exc}"


def sweep_cells(grid: dict, base: RunConfig) -> list:
    """Expand a grid over depth, b override, algorithm and epsilon."""
    depths = grid.get("depth") or [base.depth]
    bs = grid.get("b") or [base.override_b]
    algs = grid.get("algorithm") or [base.algorithm]
    eps = grid.get("epsilon") or [base.epsilon]
    if any(len(v) == 0 for k, v in grid.items()):
        return []
    cells = []
    for d in depths:
        for bb in bs:
            for a in algs:
                for e in eps:
                    cells.append(
                        replace(base, depth=d, override_b=bb, algorithm=a, epsilon=e, trace=None, summary=None)
                    )
    return cells


def sweep(grid: dict, base: RunConfig, out_csv=None, jobs: int = 1, trace_dir=None) -> list:
    """One summary row per grid cell, sorted by cell key.

    Failed cells get a row with an ``error`` column filled in.
    """
    cells = sweep_cells(grid, base)
    if trace_dir is not None:
        Path(trace_dir).mkdir(parents=True, exist_ok=True)
        cells = [
            replace(c, trace=str(Path(trace_dir) / f"{c.mode}_d{c.depth}_b{c.override_b}_{c.algorithm}_e{str(c.epsilon).replace('/', '-')}.jsonl"))
            for c in cells
        ]
    else:
        # ADV needs the event stream; keep it in a scratch file
        tmpdir = tempfile.mkdtemp(prefix="hkserver-sweep-")
        cells = [replace(c, trace=os.path.join(tmpdir, f"cell{i}.jsonl")) for i, c in enumerate(cells)]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_sweep_cell, cells))
    else:
        results = [_sweep_cell(c) for c in cells]
    rows = []
    for c, (row, err) in zip(cells, results):
        if row is None:
            row = {col: "" for col in SUMMARY_COLUMNS}
            row.update(mode=c.mode, depth=str(c.depth), b=str(c.override_b or ""), algorithm=c.algorithm,
                       epsilon=str(c.epsilon or ""))
        row["error"] = err or ""
        rows.append(row)
        if trace_dir is None and c.trace and os.path.exists(c.trace):
            os.unlink(c.trace)
    rows.sort(key=_row_key)
    if out_csv is not None:
        write_csv(rows, out_csv, SUMMARY_COLUMNS + ["error"])
    return rows


def _row_key(row):
    def num(v):
        try:
            return (0, parse(v)) if v != "" else (1, 0)
        except ValueError:
            return (2, v)

    return (row["mode"], num(row["depth"]), num(row["b"]), row["algorithm"], num(row["epsilon"]))


def write_csv(rows, path, columns) -> None:
    fh = open(path, "w", newline="", encoding="utf-8") if not isinstance(path, io.IOBase) else path
    try:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    finally:
        if fh is not path:
            fh.close()


def read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def emit_plot_data(summaries, out_dir, x: str = "depth", log_x: bool = False) -> dict:
    """Write one CSV per (mode, algorithm) series; returns {series name: path}.

    ``summaries`` are RunSummary objects or summary rows.  With ``log_x`` and
    ``x="h"`` an extra ``ln_ln_h`` column is emitted (30 significant digits,
    derived and non-authoritative).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    series: dict = {}
    for s in summaries:
        row = s.row() if isinstance(s, RunSummary) else dict(s)
        if row.get("error"):
            continue
        key = (row["mode"], row["algorithm"])
        series.setdefault(key, []).append(row)
    paths = {}
    for (mode, alg), rows in sorted(series.items()):
        rows.sort(key=lambda r: (parse(r[x]) if r[x] != "" else mpq(0), r.get("b", "")))
        cols = [x, "ratio", "b", "epsilon", "complete_phases", "complete_epochs", "budget_hit"]
        if log_x and x == "h":
            cols.insert(1, "ln_ln_h")
            for r in rows:
                hv = int(parse(r["h"]))
                if hv > 1 and math.log(hv) > 1:
                    with mpmath.workdps(40):
                        r["ln_ln_h"] = mpmath.nstr(mpmath.log(mpmath.log(hv)), 30)
                else:
                    r["ln_ln_h"] = ""
        name = f"{mode}_{alg}"
        path = out / f"{name}.csv"
        write_csv(rows, path, cols)
        paths[name] = path
    return paths
