"""Fractional server configurations, transfers and the cost ledger.

Only movement away from the root is charged; upward movement is tracked in a
separate ledger so the downward-dominance invariant can be checked.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from gmpy2 import mpq

from .rational import ONE, ZERO, q
from .tree import MetricTree, NodePath, common_prefix, is_ancestor, node_str


class TransferError(ValueError):
    def __init__(self, index: int, message: str):
        super().__init__(f"transfer {index}: {message}")
        self.index = index


class Transfer(NamedTuple):
    src: NodePath
    dst: NodePath
    amount: mpq


class MassConfig:
    """Server mass per node with cached subtree sums.

    ``mass`` only holds nodes with positive mass.  ``agg`` holds the subtree
    sum of every node that has positive mass somewhere below it, and
    ``kids`` maps such a node to the child indices leading to that mass.
    """

    __slots__ = ("mass", "agg", "kids", "total", "root")

    def __init__(self, total=ZERO, root: NodePath = ()):
        self.mass: dict = {}
        self.agg: dict = {}
        self.kids: dict = {}
        self.total = q(total)
        self.root = tuple(root)

    @classmethod
    def from_masses(cls, masses: dict, root: NodePath = ()) -> "MassConfig":
        cfg = cls(ZERO, root)
        for node, m in masses.items():
            m = q(m)
            if m < 0:
                raise ValueError(f"negative mass at {node_str(node)!r}")
            if m:
                cfg._add(tuple(node), m)
        cfg.total = sum(cfg.mass.values(), ZERO)
        return cfg

    def copy(self) -> "MassConfig":
        new = MassConfig(self.total, self.root)
        new.mass = dict(self.mass)
        new.agg = dict(self.agg)
        new.kids = {n: set(s) for n, s in self.kids.items()}
        return new

    def __getitem__(self, node: NodePath) -> mpq:
        return self.mass.get(node, ZERO)

    def __eq__(self, other):
        if not isinstance(other, MassConfig):
            return NotImplemented
        return self.mass == other.mass

    def __repr__(self):
        items = ", ".join(f"{node_str(n)!r}: {m}" for n, m in sorted(self.mass.items()))
        return f"MassConfig({{{items}}})"

    def items(self):
        return self.mass.items()

    def subtree(self, node: NodePath) -> mpq:
        return self.agg.get(node, ZERO)

    def children_with_mass(self, node: NodePath):
        return self.kids.get(node, ())

    def nodes_in(self, node: NodePath):
        """Nodes with positive mass in the subtree of ``node``, in path order."""
        if node not in self.agg:
            return
        stack = [node]
        while stack:
            n = stack.pop()
            if n in self.mass:
                yield n
            for c in sorted(self.kids.get(n, ()), reverse=True):
                stack.append(n + (c,))

    def _add(self, node: NodePath, amount: mpq, stop: int = -1) -> None:
        # amount may be negative; stop = number of leading path entries whose
        # ancestors (path lengths <= stop) keep their aggregate unchanged
        mass, agg, kids = self.mass, self.agg, self.kids
        new = mass.get(node, ZERO) + amount
        if new:
            mass[node] = new
        else:
            mass.pop(node, None)
        for p in range(len(node), stop, -1):
            anc = node[:p]
            val = agg.get(anc, ZERO) + amount
            if val:
                if anc not in agg and p > 0:
                    kids.setdefault(node[: p - 1], set()).add(node[p - 1])
                agg[anc] = val
            else:
                agg.pop(anc, None)
                kids.pop(anc, None)
                if p > 0:
                    par = node[: p - 1]
                    s = kids.get(par)
                    if s is not None:
                        s.discard(node[p - 1])

    def move(self, src: NodePath, dst: NodePath, amount: mpq) -> None:
        """Move mass without feasibility checks (callers validate)."""
        c = common_prefix(src, dst)
        self._add(src, -amount, c)
        self._add(dst, amount, c)


def initial_config(k, root: NodePath = ()) -> MassConfig:
    k = q(k)
    if k < 1:
        raise ValueError("k must be >= 1")
    return MassConfig.from_masses({tuple(root): k}, root)


def subtree_mass(config: MassConfig, subtree_root: NodePath) -> mpq:
    return config.subtree(tuple(subtree_root))


def assert_served(config: MassConfig, request: NodePath) -> bool:
    return config[tuple(request)] >= ONE


@dataclass
class CostLedger:
    down_by_level: dict = field(default_factory=dict)
    up_by_level: dict = field(default_factory=dict)
    down_total: mpq = ZERO
    up_total: mpq = ZERO

    def charge(self, level: int, cost: mpq, downward: bool) -> None:
        if downward:
            self.down_by_level[level] = self.down_by_level.get(level, ZERO) + cost
            self.down_total += cost
        else:
            self.up_by_level[level] = self.up_by_level.get(level, ZERO) + cost
            self.up_total += cost

    def absorb(self, other: "CostLedger") -> None:
        for lvl, c in other.down_by_level.items():
            self.charge(lvl, c, True)
        for lvl, c in other.up_by_level.items():
            self.charge(lvl, c, False)

    def copy(self) -> "CostLedger":
        return CostLedger(
            dict(self.down_by_level), dict(self.up_by_level), self.down_total, self.up_total
        )

    def consistent(self) -> bool:
        return self.down_total == sum(self.down_by_level.values(), ZERO) and (
            self.up_total == sum(self.up_by_level.values(), ZERO)
        )


def charge_transfer(tree: MetricTree, t: Transfer, ledger: CostLedger) -> None:
    src, dst, amount = t
    c = common_prefix(src, dst)
    lengths = tree._lengths
    depth = tree.depth
    for p in range(len(src), c, -1):
        ledger.charge(depth - p + 1, amount * lengths[p], False)
    for p in range(c + 1, len(dst) + 1):
        ledger.charge(depth - p + 1, amount * lengths[p], True)


def check_transfer(config: MassConfig, tree: MetricTree, t: Transfer, index: int) -> Transfer:
    src, dst, amount = t
    src, dst = tuple(src), tuple(dst)
    try:
        amount = q(amount)
    except TypeError as exc:
        raise TransferError(index, str(exc)) from None
    if amount <= 0:
        raise TransferError(index, f"amount must be > 0, got {amount}")
    try:
        tree.validate(src)
        tree.validate(dst)
    except ValueError as exc:
        raise TransferError(index, str(exc)) from None
    have = config[src]
    if have < amount:
        raise TransferError(
            index, f"insufficient mass at {node_str(src)!r}: has {have}, moving {amount}"
        )
    return Transfer(src, dst, amount)


def apply_transfers(
    config: MassConfig,
    transfers: Iterable[Transfer],
    ledger: CostLedger | None = None,
    tree: MetricTree | None = None,
) -> CostLedger:
    """Apply ``transfers`` in order, mutating ``config`` (and ``ledger``).

    Returns the ledger delta of this batch.  On an infeasible transfer the
    earlier transfers of the batch stay applied and ``TransferError`` names
    the offending index.
    """
    if tree is None:
        raise ValueError("a MetricTree is needed to price transfers")
    delta = CostLedger()
    for i, t in enumerate(transfers):
        t = check_transfer(config, tree, t, i)
        config.move(t.src, t.dst, t.amount)
        charge_transfer(tree, t, delta)
    if ledger is not None:
        ledger.absorb(delta)
    return delta


def down_crossings(tree: MetricTree, t: Transfer):
    """(parent, child index, cost) for every charged edge of one transfer."""
    src, dst, amount = t
    lengths = tree._lengths
    for p in range(common_prefix(src, dst) + 1, len(dst) + 1):
        yield dst[: p - 1], dst[p - 1], amount * lengths[p]


# --- capped views -------------------------------------------------------------


def capped_view(config: MassConfig, subtree_root: NodePath, cap) -> MassConfig:
    """Local configuration of a subtree whose construction expects mass ``cap``.

    A deficit shows up as virtual mass at the subtree root.  A surplus is
    parked outside the view; it is taken from the nodes closest to the
    subtree root first (where mass that crossed into the subtree sits last).
    """
    subtree_root = tuple(subtree_root)
    cap = q(cap)
    local = {n: config[n] for n in config.nodes_in(subtree_root)}
    m = config.subtree(subtree_root)
    if m <= cap:
        if cap > m:
            local[subtree_root] = local.get(subtree_root, ZERO) + (cap - m)
    else:
        surplus = m - cap
        for n in sorted(local, key=lambda n: (len(n), n)):
            take = min(surplus, local[n])
            local[n] -= take
            surplus -= take
            if not surplus:
                break
    return MassConfig.from_masses(local, subtree_root)


class CappedViewTracker:
    """Replays a raw transfer stream through the surplus-parking accounting.

    The tracked local algorithm never holds more than ``cap`` inside the
    subtree.  Inflow beyond the cap is parked outside; the part a request
    still needs is brought from the nearest node inside the subtree instead.
    Outflows use parked mass first.  Once the parked mass is used up the
    local configuration is reorganised to coincide with the raw one again.

    ``view_cost`` is the charged cost of the local algorithm on edges inside
    the subtree; ``raw_cost`` is the raw charged cost on those edges plus the
    edge entering the subtree.
    """

    def __init__(self, tree: MetricTree, config: MassConfig, subtree_root: NodePath, cap):
        self.tree = tree
        self.root = tuple(subtree_root)
        self.cap = q(cap)
        self.raw = {n: config[n] for n in config.nodes_in(self.root)}
        m = sum(self.raw.values(), ZERO)
        if m > self.cap:
            view = capped_view(config, self.root, self.cap)
            self.local = dict(view.mass)
            self.parked = m - self.cap
        else:
            self.local = dict(self.raw)
            self.parked = ZERO
        self.view_cost = ZERO
        self.raw_cost = ZERO

    def inside(self, node: NodePath) -> bool:
        return is_ancestor(self.root, node)

    @property
    def virtual(self) -> mpq:
        return self.cap - sum(self.local.values(), ZERO)

    def view(self) -> MassConfig:
        local = dict(self.local)
        v = self.virtual
        if v:
            local[self.root] = local.get(self.root, ZERO) + v
        return MassConfig.from_masses(local, self.root)

    def _charge_view(self, src: NodePath, dst: NodePath, amount: mpq) -> None:
        # downward edges strictly below the subtree root
        c = max(common_prefix(src, dst), len(self.root))
        lengths = self.tree._lengths
        for p in range(c + 1, len(dst) + 1):
            self.view_cost += amount * lengths[p]

    def _charge_raw(self, src: NodePath, dst: NodePath, amount: mpq) -> None:
        lengths = self.tree._lengths
        lo = max(common_prefix(src, dst), len(self.root) - 1)
        for p in range(lo + 1, len(dst) + 1):
            if p >= len(self.root) and dst[: len(self.root)] == self.root:
                self.raw_cost += amount * lengths[p]

    def _bump(self, d: dict, node: NodePath, amount: mpq) -> None:
        v = d.get(node, ZERO) + amount
        if v:
            d[node] = v
        else:
            d.pop(node, None)

    def _donors(self, near: NodePath, exclude: NodePath):
        cands = [n for n, m in self.local.items() if m > 0 and n != exclude]
        cands.sort(key=lambda n: (self.tree.distance(n, near), n))
        return cands

    def apply(self, t: Transfer) -> None:
        src, dst, amount = tuple(t[0]), tuple(t[1]), q(t[2])
        s_in, d_in = self.inside(src), self.inside(dst)
        if not s_in and not d_in:
            return
        self._charge_raw(src, dst, amount)
        if d_in:
            self._bump(self.raw, dst, amount)
        if s_in:
            self._bump(self.raw, src, -amount)

        if not s_in:
            # inflow: virtual mass first, any excess is parked
            u = min(amount, self.virtual)
            if u:
                self._bump(self.local, dst, u)
                self._charge_view(self.root, dst, u)
            excess = amount - u
            if excess:
                self.parked += excess
                for donor in self._donors(dst, dst):
                    take = min(excess, self.local[donor])
                    self._bump(self.local, donor, -take)
                    self._bump(self.local, dst, take)
                    self._charge_view(donor, dst, take)
                    excess -= take
                    if not excess:
                        break
        elif not d_in:
            # outflow: parked mass first
            w = min(amount, self.parked)
            self.parked -= w
            rest = amount - w
            if rest:
                for node in [src] + self._donors(src, src):
                    take = min(rest, self.local.get(node, ZERO))
                    if take:
                        self._bump(self.local, node, -take)
                        rest -= take
                    if not rest:
                        break
            if w and not self.parked:
                self._reconcile()
        else:
            have = self.local.get(src, ZERO)
            move = min(amount, have)
            if move:
                self._bump(self.local, src, -move)
                self._bump(self.local, dst, move)
                self._charge_view(src, dst, move)
            # a shortfall stays where it is: dst simply receives less

    def _reconcile(self) -> None:
        self.view_cost += transport_down_cost(self.tree, self.local, self.raw, self.root)
        self.local = dict(self.raw)


def transport_down_cost(tree: MetricTree, have: dict, want: dict, root: NodePath) -> mpq:
    """Charged cost of the cheapest rearrangement of ``have`` into ``want``.

    Both must have the same total.  On a tree the flow across each edge is
    forced: it is the difference of the two subtree sums below the edge.
    """
    agg_have: dict = {}
    agg_want: dict = {}
    for src, agg in ((have, agg_have), (want, agg_want)):
        for n, m in src.items():
            for p in range(len(n), len(root), -1):
                agg[n[:p]] = agg.get(n[:p], ZERO) + m
    cost = ZERO
    for n in set(agg_have) | set(agg_want):
        flow = agg_want.get(n, ZERO) - agg_have.get(n, ZERO)
        if flow > 0:
            cost += flow * tree._lengths[len(n)]
    return cost
