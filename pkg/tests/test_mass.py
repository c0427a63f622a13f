from fractions import Fraction

import pytest
from gmpy2 import mpq
from hypothesis import given, settings
from hypothesis import strategies as st

from hkserver.mass import (
    CappedViewTracker,
    CostLedger,
    MassConfig,
    Transfer,
    TransferError,
    apply_transfers,
    assert_served,
    capped_view,
    initial_config,
    subtree_mass,
    transport_down_cost,
)
from hkserver.tree import MetricTree

from oracles import walk_distance

T2 = MetricTree(2, "1/4")


@pytest.mark.parametrize("k", ["43/2", "1", "462"])
def test_initial_config(k):
    cfg = initial_config(k)
    assert dict(cfg.mass) == {(): mpq(k)}
    assert cfg.total == mpq(k)


def test_initial_config_rejects_small_k():
    with pytest.raises(ValueError):
        initial_config("1/2")


def test_root_to_child_is_downward():
    cfg = initial_config(2)
    d = apply_transfers(cfg, [Transfer((), (0,), mpq(1, 2))], tree=T2)
    assert d.down_total == mpq(1, 2) and d.up_total == 0
    assert d.down_by_level == {2: mpq(1, 2)}


def test_sibling_leaves_cost_both_ways():
    cfg = MassConfig.from_masses({(0, 0): 1})
    d = apply_transfers(cfg, [Transfer((0, 0), (0, 1), mpq(1))], tree=T2)
    assert d.up_total == mpq(1, 4) and d.down_total == mpq(1, 4)
    assert d.up_by_level == {1: mpq(1, 4)} and d.down_by_level == {1: mpq(1, 4)}


def test_zero_and_oversized_transfers_rejected():
    cfg = initial_config(2)
    with pytest.raises(TransferError) as exc:
        apply_transfers(cfg, [Transfer((), (0,), mpq(0))], tree=T2)
    assert exc.value.index == 0
    with pytest.raises(TransferError) as exc:
        apply_transfers(cfg, [Transfer((), (0,), mpq(1)), Transfer((1,), (0,), mpq(1))], tree=T2)
    assert exc.value.index == 1


def test_subtree_mass_examples():
    cfg = initial_config("43/2")
    assert subtree_mass(cfg, (3,)) == 0
    apply_transfers(cfg, [Transfer((), (3,), mpq(43, 2))], tree=T2)
    assert subtree_mass(cfg, (3,)) == mpq(43, 2)
    cfg = MassConfig.from_masses({(3,): 3, (3, 1): 2, (4,): 7})
    assert subtree_mass(cfg, (3,)) == 5


def test_assert_served_examples():
    assert assert_served(MassConfig.from_masses({(0, 1): 1}), (0, 1))
    assert not assert_served(MassConfig.from_masses({(0,): 1}), (0, 1))
    cfg = MassConfig.from_masses({(): 1, (1,): 1})
    apply_transfers(
        cfg, [Transfer((), (0, 1), mpq(2, 3)), Transfer((1,), (0, 1), mpq(1, 3))], tree=T2
    )
    assert assert_served(cfg, (0, 1))


def test_capped_view_full_deficit():
    v = capped_view(initial_config("43/2"), (5,), "43/2")
    assert dict(v.mass) == {(5,): mpq(43, 2)}


def test_capped_view_identity_at_cap():
    cfg = MassConfig.from_masses({(5, 0): 1, (5, 1): "1/2", (): 10})
    v = capped_view(cfg, (5,), "3/2")
    assert dict(v.mass) == {(5, 0): 1, (5, 1): mpq(1, 2)}


def test_capped_view_surplus_parks_near_root():
    cfg = MassConfig.from_masses({(5,): "1/4", (5, 0): 2, (): 1})
    v = capped_view(cfg, (5,), 2)
    assert v.total == 2
    assert dict(v.mass) == {(5, 0): 2}


def test_tracker_parked_surplus_three_nodes():
    # root, subtree root (0,) and its only leaf (0, 0)
    cfg = initial_config(5)
    tr = CappedViewTracker(T2, cfg, (0,), 2)
    tr.apply(Transfer((), (0, 0), mpq(2)))
    assert tr.view_cost == mpq(1, 2) and tr.raw_cost == mpq(5, 2)
    tr.apply(Transfer((), (0, 0), mpq(1, 4)))
    assert tr.parked == mpq(1, 4)
    assert tr.view().total == 2
    before = tr.view_cost
    tr.apply(Transfer((0, 0), (), mpq(1, 4)))
    assert tr.parked == 0
    assert tr.view_cost == before
    assert tr.view().total == 2
    assert tr.view_cost <= tr.raw_cost


def test_transport_down_cost_simple():
    t = MetricTree(2, "1/4")
    have = {(0, 0): mpq(1)}
    want = {(0, 1): mpq(1)}
    assert transport_down_cost(t, have, want, (0,)) == mpq(1, 4)


def _ref_cost(src, dst, amount, scale):
    _, up, down = walk_distance(src, dst, scale)
    return up * amount, down * amount


node3 = st.lists(st.integers(0, 2), min_size=0, max_size=3).map(tuple)


@st.composite
def transfer_runs(draw):
    steps = draw(st.lists(st.tuples(node3, node3, st.integers(1, 8)), min_size=1, max_size=25))
    return steps


@settings(max_examples=200, deadline=None)
@given(transfer_runs(), st.sampled_from(["1/4", "1/2", "1"]))
def test_conservation_dominance_and_ledger(steps, scale):
    tree = MetricTree(3, scale)
    cfg = initial_config(6)
    ledger = CostLedger()
    ref_up = ref_down = Fraction(0)
    for src, dst, eighths in steps:
        have = cfg[src]
        if have <= 0 or src == dst:
            continue
        amount = min(have, mpq(eighths, 8))
        apply_transfers(cfg, [Transfer(src, dst, amount)], ledger, tree)
        u, d = _ref_cost(src, dst, Fraction(int(amount.numerator), int(amount.denominator)), Fraction(scale))
        ref_up += u
        ref_down += d
        assert cfg.total == 6
        assert sum(cfg.mass.values(), mpq(0)) == 6
        assert all(m > 0 for m in cfg.mass.values())
        assert ledger.up_total <= ledger.down_total
        assert ledger.consistent()
    assert ledger.up_total == mpq(ref_up.numerator, ref_up.denominator)
    assert ledger.down_total == mpq(ref_down.numerator, ref_down.denominator)


@settings(max_examples=200, deadline=None)
@given(transfer_runs(), st.sampled_from(["1/4", "1/2"]), st.sampled_from([1, 2, 3]))
def test_tracker_view_cost_dominated(steps, scale, cap):
    tree = MetricTree(3, scale)
    cfg = initial_config(6)
    tr = CappedViewTracker(tree, cfg, (0,), cap)
    for src, dst, eighths in steps:
        have = cfg[src]
        if have <= 0 or src == dst:
            continue
        t = Transfer(src, dst, min(have, mpq(eighths, 8)))
        apply_transfers(cfg, [t], tree=tree)
        tr.apply(t)
        assert tr.view().total == cap
        assert all(m >= 0 for m in tr.local.values())
        assert tr.view_cost <= tr.raw_cost
