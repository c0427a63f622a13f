"""Online adversaries: the recursive phase game and the epoch controller.

Each :class:`PhaseAdversary` owns one subtree of height ``i`` and plays the
phase game on its children (subtrees of height ``i-1``), delegating requests
into a marked child to that child's own adversary.  Children adversaries are
created on first delegation and live as long as the run; a dropped child is
never requested again.

The adversary reports structural events (instance creation, phase starts,
markings, phase ends, epochs) through an ``emit`` callback so a trace can be
checked and the offline strategy reconstructed afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from gmpy2 import mpq

from .mass import MassConfig
from .rational import ZERO, fmt
from .tree import ConstructionParams, NodePath, k_value, node_str


class AdversaryStuck(RuntimeError):
    """Raised when the phase loop cannot produce a request.

    Only possible if the algorithm parks mass in subtrees that never received
    a request, which the proof's accounting does not cover.
    """


def marking_candidate_bound(total, j: int, child_threshold, b: int) -> mpq:
    """Pigeonhole bound on the least-mass unmarked carry-over at marking ``j``.

    ``total`` is the mass of the whole view (k_{i+1}), ``child_threshold`` is
    k_i - epsilon.
    """
    if not 1 <= j <= b - 1:
        raise ValueError(f"j must lie in [1, {b - 1}]")
    return (mpq(total) - j * mpq(child_threshold)) / (b - j + 1)


def phase_cost_lower_bound(total, child_threshold, b: int) -> tuple[mpq, bool]:
    """Lower bound on the mass moved across an instance's child edges per phase.

    Returns (bound, every bracketed term is nonnegative).
    """
    thr = mpq(child_threshold)
    bound = thr
    ok = True
    for j in range(1, b):
        term = thr - marking_candidate_bound(total, j, thr, b)
        ok = ok and term >= 0
        bound += term
    return bound, ok


@dataclass
class PhaseState:
    phase_number: int = 0
    marked: list = field(default_factory=list)
    prev_marked: list = field(default_factory=list)
    loop_j: int = 0
    sub_adversaries: dict = field(default_factory=dict)


class PhaseAdversary:
    """Phase game on the subtree rooted at ``root`` of height ``height``.

    ``total`` is the mass the view of this subtree holds (the cap of the
    sub-construction, or the real k at the top of a lemma run).
    """

    STUCK_LIMIT = 100_000

    def __init__(self, params: ConstructionParams, root: NodePath, height: int, total, emit):
        self.params = params
        self.root = tuple(root)
        self.height = height
        self.total = mpq(total)
        self.emit = emit
        b = params.b
        self.state = PhaseState(
            phase_number=0, marked=list(range(b)), prev_marked=list(range(b)), loop_j=b
        )
        self.next_fresh = b
        self.fresh_stage = False
        self.in_phase = False
        if height > 0:
            self.child_cap = params.k_at(height - 1)
            self.child_threshold = self.child_cap - params.epsilon
            emit(
                {
                    "type": "instance",
                    "owner": node_str(self.root),
                    "height": height,
                    "total": fmt(self.total),
                }
            )

    def _child_adv(self, c: int) -> "PhaseAdversary":
        subs = self.state.sub_adversaries
        adv = subs.get(c)
        if adv is None:
            h = self.height - 1
            adv = PhaseAdversary(self.params, self.root + (c,), h, self.params.k_at(h), self.emit)
            subs[c] = adv
        return adv

    def _start_phase(self, cfg: MassConfig) -> None:
        st = self.state
        st.prev_marked = list(st.marked)
        st.phase_number += 1
        fresh = self.next_fresh
        self.next_fresh += 1
        st.marked = [fresh]
        st.loop_j = 0
        self.in_phase = True
        self.emit(
            {
                "type": "phase_start",
                "owner": node_str(self.root),
                "phase": st.phase_number,
                "fresh": fresh,
                "prev": list(st.prev_marked),
            }
        )

    def _mark_next(self, cfg: MassConfig) -> None:
        st = self.state
        st.loop_j += 1
        j = st.loop_j
        cap = self.child_cap
        best = None
        for c in st.prev_marked:
            if c in st.marked:
                continue
            m = min(cfg.subtree(self.root + (c,)), cap)
            if best is None or m < best[0] or (m == best[0] and c < best[1]):
                best = (m, c)
        capped, c = best
        bound = marking_candidate_bound(self.total, j, self.child_threshold, self.params.b)
        st.marked.append(c)
        self.emit(
            {
                "type": "mark",
                "owner": node_str(self.root),
                "phase": st.phase_number,
                "j": j,
                "child": c,
                "capped": fmt(capped),
                "bound": fmt(bound),
            }
        )

    def _complete_phase(self) -> None:
        st = self.state
        dropped = [c for c in st.prev_marked if c not in st.marked]
        self.in_phase = False
        self.emit(
            {
                "type": "phase_complete",
                "owner": node_str(self.root),
                "phase": st.phase_number,
                "marked": list(st.marked),
                "dropped": dropped[0],
            }
        )

    def next_request(self, cfg: MassConfig) -> NodePath:
        if self.height == 0:
            return self.root
        st = self.state
        b = self.params.b
        thr = self.child_threshold
        root = self.root
        for _ in range(self.STUCK_LIMIT):
            if not self.in_phase:
                self._start_phase(cfg)
            cands = st.marked if st.loop_j > 0 else st.marked[:1]
            target = None
            tmass = None
            for c in cands:
                m = cfg.subtree(root + (c,))
                if m <= thr and (tmass is None or m < tmass or (m == tmass and c < target)):
                    target, tmass = c, m
            if target is not None:
                return self._child_adv(target).next_request(cfg)
            if st.loop_j < b - 1:
                self._mark_next(cfg)
            else:
                self._complete_phase()
        raise AdversaryStuck(
            f"no request produced in subtree {node_str(root)!r} after {self.STUCK_LIMIT} steps"
        )

    def phase_state(self) -> PhaseState:
        return self.state


@dataclass
class EpochState:
    epoch_number: int = 0
    active_subtree: int | None = None
    threshold: mpq = ZERO
    inner: PhaseAdversary | None = None


class EpochAdversary:
    """Epoch controller over a root whose children are depth-``i`` subtrees.

    Each epoch picks a child subtree without online mass and runs the phase
    game inside it.  The epoch ends once the online mass in that subtree
    strictly exceeds b^i (1 + i/(2b)).
    """

    def __init__(self, params: ConstructionParams, emit):
        self.params = params
        self.emit = emit
        i = params.depth
        self.state = EpochState(threshold=k_value(params.b, i))
        self.next_index = 0
        self.used: set = set()

    def _new_epoch(self, cfg: MassConfig) -> None:
        st = self.state
        idx = self.next_index
        while idx in self.used or cfg.subtree((idx,)) != 0:
            idx += 1
        self.used.add(idx)
        self.next_index = idx + 1
        st.epoch_number += 1
        st.active_subtree = idx
        self.emit(
            {
                "type": "epoch_start",
                "epoch": st.epoch_number,
                "subtree": idx,
                "threshold": fmt(st.threshold),
            }
        )
        p = self.params
        st.inner = PhaseAdversary(p, (idx,), p.depth, p.k, self.emit)

    def epoch_step(self, cfg: MassConfig) -> NodePath:
        st = self.state
        if st.active_subtree is None:
            self._new_epoch(cfg)
        else:
            m = cfg.subtree((st.active_subtree,))
            if m > st.threshold:
                self.emit(
                    {
                        "type": "epoch_complete",
                        "epoch": st.epoch_number,
                        "subtree": st.active_subtree,
                        "mass": fmt(m),
                    }
                )
                self._new_epoch(cfg)
        return st.inner.next_request(cfg)

    next_request = epoch_step


def lemma_adversary(params: ConstructionParams, emit) -> PhaseAdversary:
    return PhaseAdversary(params, (), params.depth, params.k, emit)


def infinite_server_mode(depth: int, params: ConstructionParams, emit) -> EpochAdversary:
    """Epoch adversary for the k = infinity game on depth-``depth`` subtrees.

    The online side is expected to start with a very large mass at the root;
    ``params.depth`` is replaced by ``depth``.
    """
    if depth < 1:
        raise ValueError("infinite-server mode needs depth >= 1")
    if params.depth != depth:
        params = params.with_(depth=depth, k=k_value(params.b, depth), h=params.b**depth)
    return EpochAdversary(params, emit)
