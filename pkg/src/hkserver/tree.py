"""Recursive rooted tree metrics with lazily materialised children.

A node is identified by its path of child indices from the root, stored as a
plain tuple of ints (``()`` is the root).  Every node below the leaf depth has
infinitely many children; nothing is allocated until a path is used, so the
tree itself is just a depth plus an edge-length schedule.

Edge levels count from the leaves: an edge whose lower endpoint sits at path
length ``p`` in a depth-``D`` tree has level ``D - p + 1``.  Root edges have
length 1 and each level further down shrinks by the factor ``scale``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import mpmath
from gmpy2 import mpq

from .rational import ONE, ZERO, q

NodePath = tuple

DEFAULT_SCALE = mpq(1, 4)


def node_str(node: NodePath) -> str:
    return "/".join(str(i) for i in node)


def parse_node(text: str) -> NodePath:
    text = text.strip()
    if not text:
        return ()
    parts = text.split("/")
    try:
        node = tuple(int(p) for p in parts)
    except ValueError:
        raise ValueError(f"bad node path {text!r}") from None
    if any(i < 0 for i in node):
        raise ValueError(f"negative child index in {text!r}")
    return node


def is_ancestor(a: NodePath, b: NodePath) -> bool:
    """True if ``a`` is ``b`` or lies above it."""
    return len(a) <= len(b) and b[: len(a)] == a


def common_prefix(a: NodePath, b: NodePath) -> int:
    n = min(len(a), len(b))
    i = 0
    while i < n and a[i] == b[i]:
        i += 1
    return i


class EdgeDescriptor(NamedTuple):
    child: NodePath
    level: int
    length: mpq


@dataclass(frozen=True)
class MetricTree:
    depth: int
    scale: mpq = DEFAULT_SCALE
    _lengths: tuple = field(init=False, repr=False, compare=False)
    _root_dist: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        scale = q(self.scale)
        if not (ZERO < scale <= ONE):
            raise ValueError("scale must lie in (0, 1]")
        object.__setattr__(self, "scale", scale)
        # _lengths[p] = length of the edge into a node at path length p
        lengths = [ZERO] + [scale ** (p - 1) for p in range(1, self.depth + 1)]
        dist = [ZERO]
        for p in range(1, self.depth + 1):
            dist.append(dist[-1] + lengths[p])
        object.__setattr__(self, "_lengths", tuple(lengths))
        object.__setattr__(self, "_root_dist", tuple(dist))

    def validate(self, node: NodePath) -> None:
        if len(node) > self.depth:
            raise ValueError(
                f"node {node_str(node)!r} is deeper than the tree (depth {self.depth})"
            )
        for i in node:
            if not isinstance(i, int) or i < 0:
                raise ValueError(f"bad child index {i!r}")

    def child(self, node: NodePath, index: int) -> NodePath:
        if len(node) >= self.depth:
            raise ValueError(f"node {node_str(node)!r} is a leaf")
        if index < 0:
            raise ValueError("child index must be >= 0")
        return tuple(node) + (index,)

    def is_leaf(self, node: NodePath) -> bool:
        return len(node) == self.depth

    def level_of(self, child: NodePath) -> int:
        """Level of the edge from ``child`` up to its parent."""
        return self.depth - len(child) + 1

    def edge_length(self, level: int) -> mpq:
        return self._lengths[self.depth - level + 1]

    def edge(self, child: NodePath) -> EdgeDescriptor:
        if not child:
            raise ValueError("the root has no parent edge")
        return EdgeDescriptor(tuple(child), self.level_of(child), self._lengths[len(child)])

    def root_distance(self, node: NodePath) -> mpq:
        return self._root_dist[len(node)]

    def height(self) -> mpq:
        """Root-to-leaf distance."""
        return self._root_dist[self.depth]

    def distance(self, a: NodePath, b: NodePath) -> mpq:
        c = common_prefix(a, b)
        d = self._root_dist
        return d[len(a)] + d[len(b)] - 2 * d[c]

    def down_distance(self, a: NodePath, b: NodePath) -> mpq:
        """Charged (away-from-root) part of the a->b path."""
        d = self._root_dist
        return d[len(b)] - d[common_prefix(a, b)]

    def path_decompose(self, a: NodePath, b: NodePath):
        """Split the a->b path at the LCA into (upward edges, downward edges)."""
        c = common_prefix(a, b)
        up = [self.edge(a[:p]) for p in range(len(a), c, -1)]
        down = [self.edge(b[:p]) for p in range(c + 1, len(b) + 1)]
        return up, down


def distance(a: NodePath, b: NodePath, params) -> mpq:
    return _tree_of(params).distance(a, b)


def path_decompose(a: NodePath, b: NodePath, params):
    return _tree_of(params).path_decompose(a, b)


def child(node: NodePath, index: int, params) -> NodePath:
    return _tree_of(params).child(node, index)


def _tree_of(obj) -> MetricTree:
    if isinstance(obj, MetricTree):
        return obj
    return obj.tree()


# --- construction parameters -------------------------------------------------


def k_value(b: int, i: int) -> mpq:
    """Online mass b^i * (1 + i/(2b)), exact."""
    return mpq(b) ** i * (1 + mpq(i, 2 * b))


def ceil_exp(x) -> int:
    """Exact ceiling of exp(x) for rational x."""
    x = q(x)
    if x == 0:
        return 1
    # exp of a nonzero rational is irrational, so enough digits always settle it
    for dps in (50, 100, 200, 400):
        with mpmath.workdps(dps):
            val = mpmath.exp(mpmath.mpf(int(x.numerator)) / int(x.denominator))
            c = int(mpmath.ceil(val))
            if abs(val - mpmath.nint(val)) > mpmath.mpf(10) ** (-(dps // 2)):
                return c
    raise ArithmeticError(f"could not settle ceil(exp({x}))")


def rational_upper(value: mpmath.mpf, digits: int = 30) -> mpq:
    """Rational just above a real, within 10**-digits."""
    scale = 10**digits
    with mpmath.workdps(digits + 20):
        return mpq(int(mpmath.ceil(value * scale)), scale)


def real_to_q(rho) -> mpq:
    if isinstance(rho, float):
        # a float argument is taken at its exact binary value
        return q(str(rho))
    return q(rho)


_OVERRIDE_KEYS = {"b", "h", "k", "epsilon", "scale", "rho"}


@dataclass(frozen=True)
class ConstructionParams:
    rho: mpq
    depth: int
    b: int
    h: int
    k: mpq
    epsilon: mpq
    scale: mpq = DEFAULT_SCALE
    paper_schedule: bool = False

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.b < 2:
            raise ValueError(f"b must be >= 2, got {self.b}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not (ZERO < self.epsilon < ONE):
            raise ValueError("epsilon must lie in (0, 1)")
        if not (ZERO < self.scale <= ONE):
            raise ValueError("scale must lie in (0, 1]")

    def tree(self) -> MetricTree:
        return MetricTree(self.depth, self.scale)

    def k_at(self, i: int) -> mpq:
        """Online mass of a depth-i sub-construction (the configured k at the top)."""
        if i == self.depth:
            return self.k
        return k_value(self.b, i)

    def h_at(self, i: int) -> int:
        if i == self.depth:
            return self.h
        return self.b**i

    def threshold(self, i: int) -> mpq:
        """Subtree mass k_i - epsilon below which a marked subtree still gets requests."""
        return self.k_at(i) - self.epsilon

    def with_(self, **changes) -> "ConstructionParams":
        return replace(self, **changes)


def derive_params(rho, depth: int, overrides: dict | None = None) -> ConstructionParams:
    """Parameters of the depth-``depth`` construction for target ratio ``rho``.

    b = ceil(exp(3 rho)), h = b^depth, k = b^depth (1 + depth/(2b)).  An override
    of ``b`` re-derives h and k from it; explicit ``h``/``k`` overrides then
    replace those.  ``epsilon`` defaults to 1/(4b), ``scale`` to 1/4.
    """
    overrides = dict(overrides or {})
    unknown = set(overrides) - _OVERRIDE_KEYS
    if unknown:
        raise ValueError(f"unknown overrides: {sorted(unknown)}")
    overrides = {key: v for key, v in overrides.items() if v is not None}
    if depth < 0:
        raise ValueError("depth must be >= 0")
    rho_q = real_to_q(rho)
    if rho_q < 0:
        raise ValueError("rho must be >= 0")

    if "b" in overrides:
        b = int(overrides["b"])
    else:
        b = ceil_exp(3 * rho_q)
    if b < 2:
        raise ValueError(f"b = {b} < 2 (rho too small); pass an override for b")
    h = b**depth
    k = k_value(b, depth)
    if "h" in overrides:
        h = int(overrides["h"])
    if "k" in overrides:
        k = q(overrides["k"])
    if k < 1:
        raise ValueError(f"k = {k} < 1")
    eps = q(overrides["epsilon"]) if "epsilon" in overrides else mpq(1, 4 * b)
    scale = q(overrides["scale"]) if "scale" in overrides else DEFAULT_SCALE
    if "rho" in overrides:
        rho_q = real_to_q(overrides["rho"])
    touched = {"b", "h", "k"} & set(overrides)
    paper = not touched and rho_q >= 1
    return ConstructionParams(
        rho=rho_q, depth=depth, b=b, h=h, k=k, epsilon=eps, scale=scale, paper_schedule=paper
    )


def schedule_rho(b: int) -> mpq:
    """ln(b)/3 rounded up to a rational (the ratio matching branching b)."""
    if b <= 1:
        return mpq(0)
    with mpmath.workdps(60):
        return rational_upper(mpmath.log(b) / 3)


class TheoremSchedule(NamedTuple):
    i_h: int
    b: int
    rho: mpq
    degenerate: bool
    feasible_chain: bool


def _floor_sqrt_ln(h: int) -> int:
    # largest i with exp(i^2) <= h
    i = 0
    while True:
        nxt = i + 1
        with mpmath.workdps(60):
            if mpmath.exp(nxt * nxt) <= h:
                i = nxt
                continue
        return i


def theorem_schedule(h: int) -> TheoremSchedule:
    """i_h = floor(sqrt(ln h)), b = floor(sqrt(i_h)), rho = ln(b)/3.

    Degenerate schedules (b <= 1) are reported, not rejected.
    """
    if h < 2:
        raise ValueError("h must be >= 2")
    i_h = _floor_sqrt_ln(h)
    b = math.isqrt(i_h)
    rho = schedule_rho(b)
    # b^i <= i^(i/2) <= exp(i^2) <= h, checked exactly where possible
    chain = b ** (2 * i_h) <= i_h**i_h if i_h > 0 else True
    with mpmath.workdps(60):
        chain = chain and mpmath.mpf(i_h) ** (mpmath.mpf(i_h) / 2) <= mpmath.exp(i_h * i_h)
        chain = chain and mpmath.exp(i_h * i_h) <= h
    return TheoremSchedule(i_h, b, rho, b <= 1, bool(chain))
