from fractions import Fraction

import pytest
from gmpy2 import mpq
from hypothesis import given, settings
from hypothesis import strategies as st

from hkserver.adversary import (
    EpochAdversary,
    PhaseAdversary,
    infinite_server_mode,
    lemma_adversary,
    marking_candidate_bound,
    phase_cost_lower_bound,
)
from hkserver.algorithms import ALGORITHMS, make_algorithm
from hkserver.mass import MassConfig, apply_transfers, initial_config
from hkserver.tree import derive_params

from oracles import marking_bound, phase_lower_bound


def to_q(f: Fraction):
    return mpq(f.numerator, f.denominator)


def test_marking_bound_paper_schedule_example():
    ref = marking_bound(Fraction(43, 2), 1, 1 - Fraction(1, 100), 21)
    assert ref == Fraction(2051, 2100)
    assert marking_candidate_bound(mpq(43, 2), 1, mpq(99, 100), 21) == to_q(ref)


def test_marking_bound_last_step_and_b2():
    k1, thr = mpq(43, 2), mpq(83, 84)
    assert marking_candidate_bound(k1, 20, thr, 21) == (k1 - 20 * thr) / 2
    assert marking_candidate_bound(mpq(5, 2), 1, mpq(7, 8), 2) == (mpq(5, 2) - mpq(7, 8)) / 2
    with pytest.raises(ValueError):
        marking_candidate_bound(k1, 0, thr, 21)
    with pytest.raises(ValueError):
        marking_candidate_bound(k1, 21, thr, 21)


@pytest.mark.parametrize("b, i", [(21, 0), (21, 1), (3, 0), (3, 2), (5, 1)])
def test_phase_lower_bound_matches_reference(b, i):
    p = derive_params(1, i + 1, {"b": b})
    thr = p.k_at(i) - p.epsilon
    lb, ok = phase_cost_lower_bound(p.k_at(i + 1), thr, b)
    ref = phase_lower_bound(Fraction(str(p.k_at(i + 1))), Fraction(str(thr)), b)
    assert lb == to_q(ref)
    assert ok


class Recorder(list):
    def __call__(self, ev):
        self.append(ev)


def test_depth_one_fresh_leaf_requested_first():
    p = derive_params(1, 1)
    ev = Recorder()
    adv = lemma_adversary(p, ev)
    req = adv.next_request(initial_config(p.k))
    assert req == (21,)
    assert [e["type"] for e in ev] == ["instance", "phase_start"]
    assert ev[1]["fresh"] == 21


def test_depth_one_phase_completes_when_all_marked_full():
    p = derive_params(1, 1, {"b": 3})
    ev = Recorder()
    adv = lemma_adversary(p, ev)
    cfg = MassConfig.from_masses({(3,): 1, (0,): 1, (1,): 1, (2,): 1, (): mpq(1, 2)})
    req = adv.next_request(cfg)
    kinds = [e["type"] for e in ev]
    assert kinds[:5] == ["instance", "phase_start", "mark", "mark", "phase_complete"]
    assert ev[4]["marked"] == [3, 0, 1] and ev[4]["dropped"] == 2
    # the next phase opens on a fresh leaf
    assert req == (4,)


def test_marks_least_mass_carryover():
    p = derive_params(1, 1, {"b": 3})
    ev = Recorder()
    adv = lemma_adversary(p, ev)
    cfg = MassConfig.from_masses({(3,): 1, (0,): "5/4", (1,): "1/2", (2,): "3/4"})
    assert adv.next_request(cfg) == (1,)
    mark = [e for e in ev if e["type"] == "mark"][0]
    assert mark["child"] == 1 and mark["capped"] == "1/2"


def test_marking_tie_breaks_on_lowest_index():
    p = derive_params(1, 1, {"b": 3})
    ev = Recorder()
    adv = lemma_adversary(p, ev)
    cfg = MassConfig.from_masses({(3,): 1, (0,): "1/2", (1,): "1/2", (2,): "3/4"})
    assert adv.next_request(cfg) == (0,)


def test_capped_mass_used_for_marking():
    # masses above the child cap compare as equal to the cap
    p = derive_params(1, 2, {"b": 3})
    ev = Recorder()
    adv = PhaseAdversary(p, (), 2, p.k, ev)
    cap = p.k_at(1)
    cfg = MassConfig.from_masses({(3,): cap, (0,): cap + 5, (1,): cap, (2,): 1})
    adv.next_request(cfg)
    marks = [e for e in ev if e["type"] == "mark"]
    assert marks[0]["child"] == 2
    assert marks[0]["capped"] == "1/1"


def test_depth_zero_requests_the_root():
    p = derive_params(1, 0)
    adv = lemma_adversary(p, Recorder())
    assert adv.next_request(initial_config(1)) == ()


def _epoch_params():
    return derive_params(1, 4, {"b": 2})


def test_epoch_threshold_value():
    adv = EpochAdversary(_epoch_params(), Recorder())
    assert adv.state.threshold == 32


def test_epoch_end_is_strict():
    ev = Recorder()
    adv = EpochAdversary(_epoch_params(), ev)
    adv.next_request(initial_config(100))
    assert adv.state.active_subtree == 0
    adv.next_request(MassConfig.from_masses({(0,): 32, (): 68}))
    assert not [e for e in ev if e["type"] == "epoch_complete"]
    adv.next_request(MassConfig.from_masses({(0,): mpq(32001, 1000), (): mpq(67999, 1000)}))
    done = [e for e in ev if e["type"] == "epoch_complete"]
    assert len(done) == 1 and done[0]["mass"] == "32001/1000"
    assert adv.state.active_subtree == 1


def test_new_epoch_skips_subtrees_with_mass():
    ev = Recorder()
    adv = EpochAdversary(_epoch_params(), ev)
    adv.next_request(initial_config(100))
    adv.next_request(MassConfig.from_masses({(0,): 33, (1, 0): 1, (): 66}))
    assert adv.state.active_subtree == 2


def test_infinite_mode_depth_one():
    p = derive_params(1, 3, {"b": 3})
    ev = Recorder()
    adv = infinite_server_mode(1, p, ev)
    assert adv.params.depth == 1 and adv.state.threshold == mpq(7, 2)
    req = adv.next_request(initial_config(10**6))
    assert len(req) == 2 and req[0] == 0
    with pytest.raises(ValueError):
        infinite_server_mode(0, p, ev)


def drive(name, params, steps):
    ev = Recorder()
    adv = lemma_adversary(params, ev)
    tree = params.tree()
    alg = make_algorithm(name, tree)
    cfg = initial_config(params.k)
    requests = []
    for _ in range(steps):
        ev.append({"type": "request", "node": adv.next_request(cfg)})
        r = ev[-1]["node"]
        requests.append(r)
        apply_transfers(cfg, alg.serve(cfg, r).transfers, tree=tree)
    return ev, requests


@settings(max_examples=12, deadline=None)
@given(st.sampled_from(sorted(ALGORITHMS)), st.sampled_from([2, 3]), st.integers(1, 2), st.integers(20, 300))
def test_freshness_over_event_streams(name, b, depth, steps):
    p = derive_params(1, depth, {"b": b})
    ev, _ = drive(name, p, steps)
    touched: dict = {}
    dropped: dict = {}
    for e in ev:
        if e["type"] == "phase_start":
            owner = e["owner"]
            assert e["fresh"] not in touched.get(owner, set())
        elif e["type"] == "phase_complete":
            dropped.setdefault(e["owner"], set()).add(e["dropped"])
        elif e["type"] == "request":
            node = e["node"]
            for i in range(len(node)):
                owner = "/".join(map(str, node[:i]))
                touched.setdefault(owner, set()).add(node[i])
                assert node[i] not in dropped.get(owner, set())


@pytest.mark.parametrize("name", sorted(ALGORITHMS))
def test_requests_replay_identically(name):
    p = derive_params(1, 2, {"b": 3})
    assert drive(name, p, 200)[1] == drive(name, p, 200)[1]
