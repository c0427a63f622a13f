"""Fractional online k-server algorithms on lazily materialised trees.

An algorithm sees the current configuration and the new request and answers
with an ordered list of transfers that leaves at least one unit of mass at
the request.  It never sees future requests.  All builtins are
deterministic; equidistant sources are taken in lexicographic path order.

Builtins that split mass (``proportional`` and ``dc-tree``) round every share
down to a multiple of ``1/grid`` and hand the rounding remainder to the first
sources in path order.  That keeps denominators bounded over long runs;
``grid=0`` switches to exact splitting.
"""

from __future__ import annotations

import heapq
from itertools import chain
from collections import OrderedDict
from dataclasses import dataclass, field

from gmpy2 import mpq

from .mass import MassConfig, Transfer
from .rational import ONE, ZERO, floor_to_grid
from .tree import MetricTree, NodePath, common_prefix

DEFAULT_GRID = 2**20


@dataclass
class ServeDecision:
    transfers: list = field(default_factory=list)


class OnlineAlgorithm:
    """Base class; subclasses implement :meth:`serve`."""

    name = "abstract"

    def __init__(self, tree: MetricTree, **options):
        self.tree = tree
        if options:
            raise ValueError(f"{self.name}: unknown options {sorted(options)}")

    def serve(self, config: MassConfig, request: NodePath) -> ServeDecision:
        raise NotImplementedError

    def options(self) -> dict:
        return {}


def _need(config: MassConfig, request: NodePath) -> mpq:
    return ONE - config[request]


def nearest_sources(config: MassConfig, tree: MetricTree, request: NodePath):
    """Yield (distance, node) for every node holding mass, nearest first.

    Ties come out in lexicographic path order.  Only subtrees with positive
    mass are expanded, so the cost is proportional to what gets visited.
    """
    lengths = tree._lengths
    heap = [(ZERO, request, 0)]
    # mode 0: ancestor of the request (may go up); mode 1: inside a side branch
    while heap:
        dist, node, mode = heapq.heappop(heap)
        if node != request and node in config.mass:
            yield dist, node
        if mode == 0:
            if node:
                heapq.heappush(heap, (dist + lengths[len(node)], node[:-1], 0))
            skip = request[len(node)] if len(node) < len(request) else None
        else:
            skip = None
        if len(node) < tree.depth:
            step = lengths[len(node) + 1]
            for c in config.children_with_mass(node):
                if c != skip:
                    heapq.heappush(heap, (dist + step, node + (c,), 1))


class GreedyNearest(OnlineAlgorithm):
    """Pull mass from the nearest nodes until one unit sits at the request."""

    name = "greedy"

    def serve(self, config, request):
        need = _need(config, request)
        out = []
        if need <= 0:
            return ServeDecision(out)
        for _, node in nearest_sources(config, self.tree, request):
            take = min(need, config[node])
            out.append(Transfer(node, request, take))
            need -= take
            if not need:
                break
        return ServeDecision(out)


def _split(total: mpq, weights: list, caps: list, grid: int) -> list:
    """Shares of ``total`` proportional to ``weights``, each <= its cap.

    Sources whose proportional share would exceed their cap are filled to the
    cap and the rest is re-split among the others (water filling).
    """
    n = len(weights)
    exact = [ZERO] * n
    free = set(range(n))
    left = total
    while free:
        wsum = sum((weights[i] for i in free), ZERO)
        over = [i for i in free if left * weights[i] / wsum > caps[i]]
        if not over:
            for i in free:
                exact[i] = left * weights[i] / wsum
            break
        for i in over:
            exact[i] = caps[i]
            left -= caps[i]
            free.discard(i)
    shares = [floor_to_grid(x, grid) for x in exact] if grid else exact
    rest = total - sum(shares, ZERO)
    i = 0
    while rest > 0:
        room = caps[i] - shares[i]
        if room > 0:
            add = min(room, rest)
            shares[i] += add
            rest -= add
        i += 1
    return shares


class ProportionalRefill(OnlineAlgorithm):
    """Refill the request from the nearest ring of sibling subtrees.

    Walking up from the request, the first ancestor whose other subtrees (or
    itself) hold mass supplies the deficit, each node contributing in
    proportion to its mass.  If that ring is too small it is drained and the
    walk continues upward.
    """

    name = "proportional"

    def __init__(self, tree, grid=DEFAULT_GRID, **options):
        super().__init__(tree, **options)
        self.grid = int(grid)

    def options(self):
        return {"grid": self.grid}

    def serve(self, config, request):
        need = _need(config, request)
        out = []
        if need <= 0:
            return ServeDecision(out)
        # descendants of the request first, then ring by ring upward
        rings = [(request, None)]
        for p in range(len(request) - 1, -1, -1):
            rings.append((request[:p], request[p]))
        for anc, skip in rings:
            pool = []
            if skip is None:
                pool = [n for n in config.nodes_in(anc) if n != request]
            else:
                if anc in config.mass:
                    pool.append(anc)
                for c in sorted(config.children_with_mass(anc)):
                    if c != skip:
                        pool.extend(config.nodes_in(anc + (c,)))
            if not pool:
                continue
            masses = [config[n] for n in pool]
            avail = sum(masses, ZERO)
            take = min(need, avail)
            if take == avail:
                shares = masses
            else:
                shares = _split(take, masses, masses, self.grid)
            for n, s in zip(pool, shares):
                if s:
                    out.append(Transfer(n, request, s))
            need -= take
            if not need:
                break
        return ServeDecision(out)


class FractionalDoubleCoverage(OnlineAlgorithm):
    """Tree double coverage on fractional mass.

    Every mass-holding node with an unobstructed path to the request sends a
    packet of size ``min(mass, remaining need)`` toward it at equal speed.
    When the nearest packets arrive they are delivered (split equally if they
    overshoot the need); the others advance by the same distance, stopping at
    the last tree node they fully reached.  This repeats until one unit is at
    the request.
    """

    name = "dc-tree"
    MAX_ROUNDS = 100_000

    def __init__(self, tree, grid=DEFAULT_GRID, **options):
        super().__init__(tree, **options)
        self.grid = int(grid)

    def options(self):
        return {"grid": self.grid}

    def _adjacent(self, cfg: MassConfig, request: NodePath):
        lengths = self.tree._lengths
        found = []
        stack = [(request, ZERO, 0)]
        while stack:
            node, dist, mode = stack.pop()
            if node != request and node in cfg.mass:
                found.append((dist, node))
                continue
            if mode == 0 and node:
                stack.append((node[:-1], dist + lengths[len(node)], 0))
            skip = request[len(node)] if mode == 0 and len(node) < len(request) else None
            if len(node) < self.tree.depth:
                step = lengths[len(node) + 1]
                for c in cfg.children_with_mass(node):
                    if c != skip:
                        stack.append((node + (c,), dist + step, 1))
        found.sort()
        return found

    def _advance(self, src: NodePath, dst: NodePath, budget: mpq) -> NodePath:
        """Furthest node on the src->dst path within distance ``budget``."""
        lengths = self.tree._lengths
        c = common_prefix(src, dst)
        node, used = src, ZERO
        path = [src[:p] for p in range(len(src) - 1, c - 1, -1)]
        path += [dst[:p] for p in range(c + 1, len(dst) + 1)]
        prev = src
        for nxt in path:
            step = lengths[max(len(prev), len(nxt))]
            if used + step > budget:
                break
            used += step
            node = prev = nxt
        return node

    def serve(self, config, request):
        need = _need(config, request)
        out = []
        if need <= 0:
            return ServeDecision(out)
        cfg = config.copy()
        for _ in range(self.MAX_ROUNDS):
            sources = self._adjacent(cfg, request)
            if not sources:
                raise RuntimeError("dc-tree: no mass left to move")
            d = sources[0][0]
            arriving = [n for dist, n in sources if dist == d]
            packets = {n: min(cfg[n], need) for _, n in sources}
            moves = []
            arrive_total = sum((packets[n] for n in arriving), ZERO)
            if arrive_total <= need:
                moves += [(n, request, packets[n]) for n in arriving]
                delivered = arrive_total
            else:
                caps = [packets[n] for n in arriving]
                shares = _split(need, [ONE] * len(arriving), caps, self.grid)
                moves += [(n, request, s) for n, s in zip(arriving, shares) if s]
                delivered = need
            for dist, n in sources:
                if dist == d:
                    continue
                stop = self._advance(n, request, d)
                if stop != n:
                    moves.append((n, stop, packets[n]))
            for src, dst, amt in moves:
                cfg.move(src, dst, amt)
                out.append(Transfer(src, dst, amt))
            need -= delivered
            if need <= 0:
                return ServeDecision(out)
        raise RuntimeError("dc-tree: did not converge")


class Hoarder(OnlineAlgorithm):
    """Keep spare mass at the root and send exactly the deficit per request.

    When the root runs dry, the least recently requested nodes are emptied
    back to the root first.  With ``window=w`` mass is also pulled back from
    every node that is not among the last ``w`` distinct requests.
    """

    name = "hoarder"

    def __init__(self, tree, window=0, **options):
        super().__init__(tree, **options)
        self.window = int(window)
        self.recent: OrderedDict = OrderedDict()

    def options(self):
        return {"window": self.window}

    def serve(self, config, request):
        root = ()
        out = []
        need = _need(config, request)
        self.recent.pop(request, None)
        self.recent[request] = None
        if need > 0:
            at_root = config[root] if request != root else ZERO
            # mass outside the root, request and LRU list is pulled as well
            if at_root < need:
                stray = sorted(n for n in config.mass if n != root and n != request and n not in self.recent)
                victims = (n for n in self.recent if n != request)
                for n in chain(stray, victims):
                    if at_root >= need:
                        break
                    m = config[n]
                    if m:
                        out.append(Transfer(n, root, m))
                        at_root += m
                if not self.window:
                    # emptied nodes only matter again once re-requested
                    for t in out:
                        self.recent.pop(t.src, None)
            out.append(Transfer(root, request, need))
        if self.window:
            while len(self.recent) > self.window:
                old, _ = self.recent.popitem(last=False)
                moved = sum((t.amount for t in out if t.src == old), ZERO)
                gained = sum((t.amount for t in out if t.dst == old), ZERO)
                m = config[old] - moved + gained
                if m and old != root:
                    out.append(Transfer(old, root, m))
        return ServeDecision(out)


ALGORITHMS = {
    "greedy": GreedyNearest,
    "proportional": ProportionalRefill,
    "dc-tree": FractionalDoubleCoverage,
    "hoarder": Hoarder,
}


def parse_options(pairs) -> dict:
    """``["grid=1024", "window=5"]`` -> dict; values stay strings."""
    opts = {}
    for item in pairs or ():
        if "=" not in item:
            raise ValueError(f"algorithm option {item!r} is not key=value")
        key, value = item.split("=", 1)
        opts[key.strip()] = value.strip()
    return opts


def make_algorithm(name: str, tree: MetricTree, options: dict | None = None) -> OnlineAlgorithm:
    try:
        cls = ALGORITHMS[name]
    except KeyError:
        raise ValueError(f"unknown algorithm {name!r}; choose from {sorted(ALGORITHMS)}") from None
    return cls(tree, **(options or {}))
