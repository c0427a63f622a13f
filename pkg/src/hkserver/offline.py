"""Offline side: the retrospective offline strategy and an exact optimum oracle.

The offline strategy keeps b^(i-1) servers in every marked child of every
height-i phase instance.  At the start of a phase it moves one group from the
child that the phase ends up dropping into the fresh child; which child that
is only becomes known later, so the strategy is reconstructed in a second
pass over the finished trace.  Offline algorithms may use hindsight.

``brute_force_opt`` solves small instances exactly by dynamic programming
over (request index, server multiset); ``enumerate_opt`` walks every lazy
schedule and serves as its independent cross-check.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from gmpy2 import mpq

from .adversary import phase_cost_lower_bound
from .rational import ZERO, parse
from .trace import TraceError, read_records, setup_from_header
from .tree import MetricTree, NodePath, is_ancestor, k_value, node_str, parse_node


def _records(trace):
    if isinstance(trace, (list, tuple)):
        return trace
    return read_records(trace)


@dataclass
class AdvAccount:
    per_phase: list = field(default_factory=list)  # (phase id, level cost, inner cost) of the top instance
    per_epoch: list = field(default_factory=list)  # (epoch, entry cost, inner cost)
    phase_level: dict = field(default_factory=dict)  # (owner, phase) -> cost on the owner's child edges
    phase_expected: dict = field(default_factory=dict)  # (owner, phase) -> group size * edge length
    complete: set = field(default_factory=set)  # (owner, phase) pairs that completed
    prefix: list = field(default_factory=list)  # cumulative cost after each request
    total: mpq = ZERO
    placement: mpq = ZERO  # everything paid before the first request
    infeasible: list = field(default_factory=list)  # (request index, node)
    shortfalls: list = field(default_factory=list)  # group moves that found too few servers
    top_owner: str = ""

    def prefix_cost(self, m: int) -> mpq:
        """Cost after the first ``m`` requests."""
        if m <= 0:
            return self.placement
        return self.prefix[m - 1]


def _first_pass(records):
    marked_final = {}
    dropped = {}
    header = None
    for rec in records:
        t = rec.get("type")
        if t == "header":
            header = rec
        elif t == "phase_start":
            marked_final[(rec["owner"], rec["phase"])] = [rec["fresh"]]
        elif t == "mark":
            marked_final[(rec["owner"], rec["phase"])].append(rec["child"])
        elif t == "phase_complete":
            dropped[(rec["owner"], rec["phase"])] = rec["dropped"]
    if header is None:
        raise TraceError("trace has no header")
    return header, marked_final, dropped


def adv_cost(trace) -> AdvAccount:
    """Replay the offline strategy over a recorded trace."""
    header, marked_final, dropped = _first_pass(_records(trace))
    setup = setup_from_header(header)
    tree = setup.tree
    b = setup.params.b
    lengths = tree._lengths
    acc = AdvAccount()
    counts: dict = {(): setup.adv_servers}
    heights: dict = {}
    total = ZERO
    top = {"owner": None, "phase": 0, "level": ZERO, "inner": ZERO}
    epoch = {"n": 0, "subtree": None, "entry": ZERO, "inner": ZERO}
    prev_marked: dict = {}
    placed_before_requests = True

    def flush_top():
        if top["owner"] is not None and top["phase"] > 0:
            acc.per_phase.append((top["phase"], top["level"], top["inner"]))

    def flush_epoch():
        if epoch["n"] > 0:
            acc.per_epoch.append((epoch["n"], epoch["entry"], epoch["inner"]))

    def move_group(src_root: NodePath, dst: NodePath, n: int, key, whole_subtree=True):
        """Move n servers to dst, gathered from src_root's subtree or src_root alone."""
        if whole_subtree:
            got = 0
            for node in [x for x in counts if is_ancestor(src_root, x)]:
                got += counts.pop(node)
        else:
            got = counts.pop(src_root, 0)
        if got < n:
            acc.shortfalls.append((key, got, n))
        if got > n:
            counts[src_root] = got - n
        counts[dst] = counts.get(dst, 0) + n
        # up to the common ancestor is free; down from it is charged
        return n * tree.down_distance(src_root, dst)

    def charge(owner_key, cost, owner):
        nonlocal total
        total += cost
        if owner_key is not None:
            acc.phase_level[owner_key] = acc.phase_level.get(owner_key, ZERO) + cost
        if top["owner"] is not None:
            if owner == top["owner"]:
                top["level"] += cost
            else:
                top["inner"] += cost
        if epoch["n"] > 0:
            epoch["inner"] += cost

    for rec in _records(trace):
        t = rec.get("type")
        if t == "instance":
            owner = rec["owner"]
            root = parse_node(owner)
            h = int(rec["height"])
            heights[owner] = h
            if top["owner"] is None and not setup.epoch_mode:
                top["owner"] = owner
            if setup.epoch_mode and epoch["subtree"] is not None and root == (epoch["subtree"],):
                flush_top()
                top.update(owner=owner, phase=0, level=ZERO, inner=ZERO)
            group = b ** (h - 1)
            prev_marked[owner] = list(range(b))
            cost = ZERO
            for c in range(b):
                cost += move_group(root, root + (c,), group, (owner, 0), whole_subtree=False)
            charge((owner, 0), cost, owner)
            if placed_before_requests:
                acc.placement += cost
        elif t == "phase_start":
            owner, p = rec["owner"], rec["phase"]
            root = parse_node(owner)
            group = b ** (heights[owner] - 1)
            fresh = rec["fresh"]
            key = (owner, p)
            if owner == top["owner"]:
                flush_top()
                top.update(phase=p, level=ZERO, inner=ZERO)
            donor = dropped.get(key)
            if donor is None:
                final = marked_final.get(key, [])
                spare = [c for c in rec["prev"] if c not in final]
                donor = min(spare) if spare else None
            if donor is None:
                acc.shortfalls.append((key, 0, group))
                continue
            cost = move_group(root + (donor,), root + (fresh,), group, key)
            acc.phase_expected[key] = group * lengths[len(root) + 1]
            charge(key, cost, owner)
            if placed_before_requests:
                acc.placement += cost
        elif t == "phase_complete":
            acc.complete.add((rec["owner"], rec["phase"]))
        elif t == "epoch_start":
            flush_epoch()
            i = setup.params.depth
            if epoch["subtree"] is not None:
                # previous epoch's servers return to the root for free
                old = (epoch["subtree"],)
                back = 0
                for node in [x for x in counts if is_ancestor(old, x)]:
                    back += counts.pop(node)
                counts[()] = counts.get((), 0) + back
            idx = int(rec["subtree"])
            epoch.update(n=int(rec["epoch"]), subtree=idx, entry=ZERO, inner=ZERO)
            group = b**i
            cost = move_group((), (idx,), group, ("epoch", epoch["n"]), whole_subtree=False)
            total += cost
            epoch["entry"] = cost
            if placed_before_requests:
                acc.placement += cost
        elif t == "request":
            placed_before_requests = False
            node = parse_node(rec["node"])
            if counts.get(node, 0) < 1:
                acc.infeasible.append((int(rec["i"]), rec["node"]))
            acc.prefix.append(total)
    flush_top()
    flush_epoch()
    acc.top_owner = top["owner"] if top["owner"] is not None else ""
    acc.total = acc.prefix[-1] if acc.prefix else total
    return acc


# --- exact optimum on small explicit trees -----------------------------------


class BudgetExceeded(RuntimeError):
    pass


@dataclass
class ExplicitTree:
    """Finite rooted tree given by parent pointers and parent-edge lengths."""

    parent: dict
    length: dict
    root: object = ()

    def __post_init__(self):
        self.nodes = [self.root] + [n for n in self.parent if n != self.root]
        self._depth = {}
        self._anc = {}
        for n in self.nodes:
            chain = [n]
            while chain[-1] != self.root:
                chain.append(self.parent[chain[-1]])
            self._anc[n] = chain
            self._depth[n] = sum((mpq(self.length[x]) for x in chain[:-1]), ZERO)

    @classmethod
    def from_paths(cls, tree: MetricTree, paths) -> "ExplicitTree":
        nodes = {()}
        for p in paths:
            p = tuple(p)
            for i in range(len(p) + 1):
                nodes.add(p[:i])
        parent = {n: n[:-1] for n in nodes if n}
        length = {n: tree._lengths[len(n)] for n in nodes if n}
        return cls(parent, length, ())

    def lca(self, a, b):
        anc = set(self._anc[a])
        for x in self._anc[b]:
            if x in anc:
                return x
        return self.root

    def down(self, a, b) -> mpq:
        """Charged cost of moving one server from a to b."""
        return self._depth[b] - self._depth[self.lca(a, b)]


@dataclass
class OptInstance:
    tree: ExplicitTree
    sequence: list
    h: int


DEFAULT_BUDGET = {"h": 3, "nodes": 10, "requests": 14}


def _check_budget(inst: OptInstance, budget: dict) -> None:
    if inst.h < 1:
        raise ValueError("h must be >= 1")
    if inst.h > budget["h"] or len(inst.tree.nodes) > budget["nodes"] or len(inst.sequence) > budget["requests"]:
        raise BudgetExceeded(
            f"instance (h={inst.h}, nodes={len(inst.tree.nodes)}, requests={len(inst.sequence)}) "
            f"exceeds budget {budget}"
        )
    for r in inst.sequence:
        if r not in inst.tree._depth:
            raise ValueError(f"request {r!r} is not a node of the tree")


def brute_force_opt(instance: OptInstance, budget: dict | None = None) -> mpq:
    """Minimum charged cost of serving the sequence with h servers from the root.

    Dynamic program over (request index, server multiset).  Any configuration
    containing the request may follow any other; moving between two
    multisets costs the cheapest server matching under the downward-only
    charge.  Integer arithmetic after scaling by the common denominator.
    """
    budget = {**DEFAULT_BUDGET, **(budget or {})}
    _check_budget(instance, budget)
    tree, h = instance.tree, instance.h
    nodes = tree.nodes
    n = len(nodes)
    index = {v: i for i, v in enumerate(nodes)}
    den = 1
    for v in nodes:
        den = math.lcm(den, int(mpq(tree._depth[v]).denominator))
    down = np.zeros((n, n), dtype=object)
    for a in nodes:
        for b in nodes:
            down[index[a], index[b]] = int(tree.down(a, b) * den)
    # worst total cost fits easily in int64 for budgeted instances
    big = int(down.max()) * h * (len(instance.sequence) + 1) + 1
    dtype = np.int64 if big < 2**60 else object
    down = down.astype(dtype)
    states = np.array(list(itertools.combinations_with_replacement(range(n), h)), dtype=np.int64)
    s = len(states)
    move = None
    for perm in itertools.permutations(range(h)):
        c = np.zeros((s, s), dtype=dtype)
        for i in range(h):
            c = c + down[states[:, i][:, None], states[:, perm[i]][None, :]]
        move = c if move is None else np.minimum(move, c)
    inf = big * 4
    start = index[tree.root]
    dp = np.full(s, inf, dtype=dtype)
    dp[int(np.flatnonzero((states == start).all(axis=1))[0])] = 0
    for r in instance.sequence:
        ok = (states == index[r]).any(axis=1)
        best = (dp[:, None] + move).min(axis=0)
        dp = np.where(ok, best, inf)
    return mpq(int(dp.min()), den)


def enumerate_opt(instance: OptInstance) -> mpq:
    """Exhaustive search over lazy schedules (independent of the DP).

    A lazy schedule moves exactly one server, and only when the request is
    uncovered; with a cost satisfying the triangle inequality this loses
    nothing.  Branches whose cost already reaches the best known are cut.
    """
    tree, seq = instance.tree, list(instance.sequence)
    best = [None]

    def go(i, pos, cost):
        if best[0] is not None and cost >= best[0]:
            return
        while i < len(seq) and seq[i] in pos:
            i += 1
        if i == len(seq):
            best[0] = cost
            return
        r = seq[i]
        for j, s in enumerate(pos):
            if s in pos[:j]:
                continue
            nxt = pos[:j] + (r,) + pos[j + 1:]
            go(i + 1, tuple(sorted(nxt, key=repr)), cost + tree.down(s, r))

    go(0, tuple([tree.root] * instance.h), ZERO)
    return best[0]


def opt_for_trace(trace, max_requests: int = 14, budget: dict | None = None):
    """(m, OPT of the first m requests) on the explicit tree a trace touches."""
    records = list(_records(trace))
    setup = setup_from_header(records[0])
    seq = [parse_node(r["node"]) for r in records if r.get("type") == "request"][:max_requests]
    tree = ExplicitTree.from_paths(setup.tree, seq)
    inst = OptInstance(tree, seq, setup.params.h)
    return len(seq), brute_force_opt(inst, budget)


# --- bound validation -------------------------------------------------------


def certified_rho(params, height: int) -> mpq:
    """Ratio certified by the per-phase bound of a height-``height`` instance.

    The root-level bound L (in units of the group size b^(i-1)) splits as
    group * (rho + 1/2); this returns L / group - 1/2.
    """
    total = params.k_at(height)
    thr = params.k_at(height - 1) - params.epsilon
    lb, _ = phase_cost_lower_bound(total, thr, params.b)
    return lb / params.b ** (height - 1) - mpq(1, 2)


@dataclass
class BoundsReport:
    rho: mpq
    slack_cap: mpq | None = None
    boundary: int | None = None  # requests up to the end of the first complete phase
    max_slack: mpq | None = None
    prefix_violations: list = field(default_factory=list)
    phase_rows: list = field(default_factory=list)  # (phase, alg, adv, holds)
    phase_chain_violations: list = field(default_factory=list)
    epoch_rows: list = field(default_factory=list)
    epoch_violations: list = field(default_factory=list)
    opt_rows: list = field(default_factory=list)  # (m, opt, adv, holds)
    opt_violations: list = field(default_factory=list)
    alg_prefix: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def ratio_rows(self, adv: AdvAccount, stride: int = 1):
        """(prefix_m, alg_cost, adv_cost, opt_cost or None, ratio or None)."""
        opt = {m: o for m, o, _, _ in self.opt_rows}
        n = len(self.alg_prefix)
        marks = set(range(stride, n + 1, max(stride, 1))) | set(opt) | ({n} if n else set())
        for m in sorted(marks):
            alg = self.alg_prefix[m - 1]
            a = adv.prefix_cost(m)
            yield m, alg, a, opt.get(m), (alg / a if a else None)


def validate_bounds(trace, adv: AdvAccount, opt=None) -> BoundsReport:
    """Prefix, per-phase and per-epoch inequalities against the offline strategy.

    ``opt`` is an optional iterable of (m, OPT of the first m requests).
    """
    records = _records(trace)
    header = None
    alg = ZERO
    alg_prefix = []
    rep = None
    top_phase = None
    phase_alg = ZERO
    first_complete = None
    first_any = None
    epoch_mode = False
    epoch = None
    tree = None
    for rec in records:
        t = rec.get("type")
        if t == "header":
            header = rec
            setup = setup_from_header(rec)
            rep = BoundsReport(rho=setup.params.rho)
            epoch_mode = setup.epoch_mode
            if epoch_mode:
                # an epoch only guarantees min(rho, i/(2b)) once root-edge entry is counted
                p = setup.params
                rep.rho = min(p.rho, mpq(p.depth, 2 * p.b))
            tree = setup.tree
            params = setup.params
        elif t == "request":
            cost = sum((parse(v) for v in rec["down"].values()), ZERO)
            alg += cost
            alg_prefix.append(alg)
            if top_phase is not None:
                phase_alg += cost
            if epoch is not None:
                root = (epoch["subtree"],)
                for s, d, a in rec["transfers"]:
                    src, dst, amt = parse_node(s), parse_node(d), parse(a)
                    if not is_ancestor(root, dst):
                        continue
                    c = 0
                    while c < min(len(src), len(dst)) and src[c] == dst[c]:
                        c += 1
                    for p in range(c + 1, len(dst) + 1):
                        if p == 1:
                            epoch["entry"] += amt * tree._lengths[p]
                        else:
                            epoch["inside"] += amt * tree._lengths[p]
        elif t == "phase_complete" and first_any is None:
            first_any = len(alg_prefix)
        if t == "phase_start" and rec["owner"] == adv.top_owner and not epoch_mode:
            top_phase = rec["phase"]
            phase_alg = ZERO
        elif t == "phase_complete" and rec["owner"] == adv.top_owner and not epoch_mode:
            if first_complete is None:
                first_complete = len(alg_prefix)
            rows = {p: (lvl, inner) for p, lvl, inner in adv.per_phase}
            lvl, inner = rows.get(rec["phase"], (ZERO, ZERO))
            adv_phase = lvl + inner
            holds = phase_alg >= rep.rho * adv_phase
            rep.phase_rows.append((rec["phase"], phase_alg, adv_phase, holds))
            if not holds:
                rep.phase_chain_violations.append(rec["phase"])
            top_phase = None
        elif t == "phase_complete" and epoch_mode and first_complete is None and epoch is not None:
            if rec["owner"] == node_str((epoch["subtree"],)):
                first_complete = len(alg_prefix)
        elif t == "epoch_start":
            epoch = {"n": int(rec["epoch"]), "subtree": int(rec["subtree"]), "entry": ZERO, "inside": ZERO}
        elif t == "epoch_complete":
            if first_complete is None:
                first_complete = len(alg_prefix)
            _close_epoch(rep, adv, params, epoch, tree)
            epoch = None
    if rep is None:
        raise TraceError("trace has no header")
    rep.alg_prefix = alg_prefix

    # prefix form: rho*ADV - ALG must not exceed what it was by the end of the first complete phase
    rho = rep.rho
    slack = [rho * adv.prefix[m] - alg_prefix[m] for m in range(len(alg_prefix))]
    if slack:
        rep.max_slack = max(slack)
    if first_complete is None and first_any is not None:
        first_complete = first_any
        rep.notes.append("no top-level phase completed: slack cap taken at the first inner phase end")
    if first_complete is None and slack:
        first_complete = 1
        rep.notes.append("no phase completed: slack cap taken at the first request")
    if first_complete is not None:
        rep.boundary = first_complete
        head = slack[:first_complete] or [rho * adv.placement]
        rep.slack_cap = max(head)
        rep.prefix_violations = [
            m + 1 for m in range(first_complete, len(slack)) if slack[m] > rep.slack_cap
        ]
    if opt is not None:
        for m, o in opt:
            a = adv.prefix_cost(m)
            ok = o <= a
            rep.opt_rows.append((m, o, a, ok))
            if not ok:
                rep.opt_violations.append(m)
    return rep


def _close_epoch(rep: BoundsReport, adv: AdvAccount, params, epoch, tree) -> None:
    i = params.depth
    b = params.b
    rows = {e: (entry, inner) for e, entry, inner in adv.per_epoch}
    entry, inner = rows.get(epoch["n"], (ZERO, ZERO))
    group = mpq(b) ** i
    rho = certified_rho(params, i) if i >= 1 else ZERO
    gain = group * mpq(i, 2 * b)
    lhs = (rho * inner + gain) / (inner + group)
    rhs = min(rho, mpq(i, 2 * b))
    threshold = k_value(b, i) * tree._lengths[1]
    ok_display = lhs >= rhs
    ok_entry = epoch["entry"] > threshold
    alg_total = epoch["entry"] + epoch["inside"]
    measured = alg_total / (inner + entry) if inner + entry else None
    rep.epoch_rows.append(
        {
            "epoch": epoch["n"],
            "alg_entry": epoch["entry"],
            "alg_inside": epoch["inside"],
            "adv_entry": entry,
            "adv_inner": inner,
            "rho": rho,
            "lhs": lhs,
            "rhs": rhs,
            "measured_ratio": measured,
            "holds": ok_display and ok_entry,
        }
    )
    if not (ok_display and ok_entry):
        rep.epoch_violations.append(epoch["n"])
