import csv
import gzip
import json
import math

import pytest
from gmpy2 import mpq

from hkserver import algorithms
from hkserver.algorithms import OnlineAlgorithm, ServeDecision
from hkserver.harness import (
    SUMMARY_COLUMNS,
    ContractViolation,
    DegenerateSchedule,
    RunConfig,
    emit_plot_data,
    run,
    sweep,
    verify,
)
from hkserver.mass import Transfer
from hkserver.rational import parse


def lemma(tmp_path, name="t.jsonl", **kw):
    base = dict(mode="lemma", rho="1", depth=1, algorithm="greedy", max_requests=2000)
    base.update(kw)
    return RunConfig(trace=str(tmp_path / name), **base)


def test_run_depth_one_greedy(tmp_path):
    cfg = lemma(tmp_path, max_requests=10**5, max_cost="3000")
    res = run(cfg)
    s = res.summary
    assert s.complete_phases >= 1
    assert s.ratio == s.alg_cost / s.adv_cost
    assert s.request_count == s.requests > 0
    rep = verify(cfg.trace, replay=False)
    rows = list(rep.bounds.ratio_rows(rep.adv, stride=100))
    assert rows and rows[-1][0] == s.requests


def test_run_depth_zero(tmp_path):
    for name in sorted(algorithms.ALGORITHMS):
        cfg = lemma(tmp_path, f"{name}.jsonl", depth=0, algorithm=name, max_requests=5)
        res = run(cfg, keep_records=True)
        reqs = [r for r in res.records if r["type"] == "request"]
        assert all(r["node"] == "" for r in reqs)
        assert res.summary.alg_cost == 0


def test_theorem_degenerate_refused(tmp_path):
    cfg = RunConfig(mode="theorem", h=100, algorithm="greedy", max_requests=10, trace=str(tmp_path / "x"))
    with pytest.raises(DegenerateSchedule):
        run(cfg)
    cfg.override_b = 3
    res = run(cfg)
    assert any("degenerate" in w for w in res.summary.warnings)
    assert res.summary.depth == 2


def test_config_validation():
    with pytest.raises(ValueError):
        RunConfig(mode="lemma", depth=1).validate()
    with pytest.raises(ValueError):
        RunConfig(mode="theorem").validate()
    with pytest.raises(ValueError):
        RunConfig(mode="lemma", rho="1", depth=1, max_requests=0).validate()
    with pytest.raises(ValueError):
        RunConfig(mode="bogus").validate()


def _read(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh]


def test_verify_conforming_trace(tmp_path):
    cfg = lemma(tmp_path, algorithm="proportional", max_requests=3000)
    run(cfg)
    rep = verify(cfg.trace)
    assert rep.ok, {k: v[:2] for k, v in rep.violations.items() if v}
    assert rep.checked["determinism"] == 1
    assert rep.checked["pigeonhole"] > 0


def test_verify_flags_corrupted_amount(tmp_path):
    cfg = lemma(tmp_path, algorithm="proportional", max_requests=300)
    run(cfg)
    recs = _read(cfg.trace)
    target = next(r for r in recs if r["type"] == "request" and r["i"] == 40)
    src, dst, amt = target["transfers"][0]
    target["transfers"][0][2] = str(parse(amt) + mpq(1, 3)).replace(" ", "")
    bad = tmp_path / "bad.jsonl"
    bad.write_text("".join(json.dumps(r, separators=(",", ":")) + "\n" for r in recs))
    rep = verify(str(bad), replay=False)
    assert rep.violations["conservation"]
    assert rep.violations["conservation"][0]["at"] == 40


def test_verify_truncated_trace(tmp_path):
    cfg = lemma(tmp_path, algorithm="dc-tree", max_requests=2000)
    run(cfg)
    lines = open(cfg.trace).read().splitlines(keepends=True)
    cut = tmp_path / "cut.jsonl"
    cut.write_text("".join(lines[: len(lines) // 2]) + lines[len(lines) // 2][:17])
    rep = verify(str(cut), replay=True)
    assert any("incomplete final phase" in n for n in rep.notes)
    assert any("no footer" in n for n in rep.notes)
    # the torn final line is an unparseable record, everything before it checks out
    others = {k: v for k, v in rep.violations.items() if v and k != "parse"}
    assert not others


def test_verify_unparseable(tmp_path):
    p = tmp_path / "junk.jsonl"
    p.write_text("not json\n")
    rep = verify(str(p))
    assert rep.violations["parse"]


def test_footer_totals_match_deltas(tmp_path):
    cfg = lemma(tmp_path, algorithm="hoarder", max_requests=500)
    run(cfg)
    recs = _read(cfg.trace)
    down = sum((parse(v) for r in recs if r["type"] == "request" for v in r["down"].values()), mpq(0))
    up = sum((parse(v) for r in recs if r["type"] == "request" for v in r["up"].values()), mpq(0))
    footer = recs[-1]
    assert footer["type"] == "footer"
    assert parse(footer["down_total"]) == down and parse(footer["up_total"]) == up


@pytest.mark.parametrize("suffix", [".jsonl", ".jsonl.gz"])
def test_byte_identical_reruns(tmp_path, suffix):
    a = lemma(tmp_path, "a" + suffix, algorithm="dc-tree", max_requests=400)
    b = lemma(tmp_path, "b" + suffix, algorithm="dc-tree", max_requests=400)
    run(a)
    run(b)
    assert open(a.trace, "rb").read() == open(b.trace, "rb").read()
    if suffix.endswith(".gz"):
        with gzip.open(a.trace, "rt") as fh:
            assert json.loads(fh.readline())["type"] == "header"


class Cheater(OnlineAlgorithm):
    name = "cheater"

    def serve(self, config, request):
        return ServeDecision([Transfer((), request, mpq(1, 2))])


def test_contract_violation_persists_trace(tmp_path, monkeypatch):
    monkeypatch.setitem(algorithms.ALGORITHMS, "cheater", Cheater)
    cfg = lemma(tmp_path, algorithm="cheater", max_requests=10)
    with pytest.raises(ContractViolation):
        run(cfg)
    recs = _read(cfg.trace)
    assert recs[0]["type"] == "header"
    assert any(r["type"] == "violation" for r in recs)
    assert recs[-1]["type"] == "footer"


def test_summary_json(tmp_path):
    cfg = lemma(tmp_path, max_requests=50)
    cfg.summary = str(tmp_path / "s.json")
    run(cfg)
    data = json.load(open(cfg.summary))
    assert set(SUMMARY_COLUMNS) <= set(data)
    assert data["requests"] == "50"


def test_infinite_mode_runs(tmp_path):
    cfg = RunConfig(mode="infinite", depth=1, override_b=3, algorithm="hoarder", max_requests=200,
                    max_epochs=3, trace=str(tmp_path / "inf.jsonl"))
    res = run(cfg)
    assert res.summary.complete_epochs == 3
    rep = verify(cfg.trace)
    assert rep.ok, {k: v[:2] for k, v in rep.violations.items() if v}


def test_infinite_mode_budget_event(tmp_path):
    cfg = RunConfig(mode="infinite", depth=2, override_b=3, algorithm="greedy", max_requests=50,
                    trace=str(tmp_path / "inf.jsonl"))
    res = run(cfg)
    assert res.summary.budget_hit
    recs = _read(cfg.trace)
    assert recs[-2]["type"] == "stalled_budget"
    assert res.summary.ratio is not None


def test_sweep_cardinality(tmp_path):
    base = RunConfig(mode="lemma", max_requests=30)
    grid = {"depth": [1, 2, 3], "b": [3, 4, 5], "algorithm": ["greedy", "dc-tree"]}
    out = tmp_path / "sweep.csv"
    rows = sweep(grid, base, out_csv=str(out), jobs=2)
    assert len(rows) == 18
    assert not any(r["error"] for r in rows)
    with open(out) as fh:
        read = list(csv.DictReader(fh))
    assert len(read) == 18
    assert list(read[0])[: len(SUMMARY_COLUMNS)] == SUMMARY_COLUMNS
    keys = [(r["depth"], r["b"], r["algorithm"]) for r in read]
    assert keys == sorted(keys, key=lambda k: (int(k[0]), int(k[1]), k[2]))


def test_sweep_empty_grid(tmp_path):
    out = tmp_path / "empty.csv"
    rows = sweep({"depth": []}, RunConfig(mode="lemma", max_requests=5), out_csv=str(out))
    assert rows == []
    assert out.read_text().strip() == ",".join(SUMMARY_COLUMNS + ["error"])


def test_sweep_records_cell_failures(tmp_path):
    base = RunConfig(mode="lemma", max_requests=5, depth=1)
    rows = sweep({"b": [1, 3]}, base)
    assert len(rows) == 2
    failed = [r for r in rows if r["error"]]
    assert len(failed) == 1 and "b" in failed[0]["error"]


def test_plot_data_single_point(tmp_path):
    res = run(lemma(tmp_path, max_requests=20))
    paths = emit_plot_data([res.summary], tmp_path / "plots")
    assert list(paths) == ["lemma_greedy"]
    rows = list(csv.DictReader(open(paths["lemma_greedy"])))
    assert len(rows) == 1 and rows[0]["depth"] == "1"


def test_plot_data_series_per_mode_and_algorithm(tmp_path):
    summaries = [
        run(lemma(tmp_path, "a", max_requests=20)).summary,
        run(lemma(tmp_path, "b", max_requests=20, algorithm="hoarder")).summary,
        run(RunConfig(mode="theorem", h=20, override_b=3, algorithm="greedy", max_requests=20,
                      trace=str(tmp_path / "c"))).summary,
    ]
    paths = emit_plot_data(summaries, tmp_path / "plots")
    assert sorted(paths) == ["lemma_greedy", "lemma_hoarder", "theorem_greedy"]


def test_plot_data_log_x(tmp_path):
    rows = [
        {"mode": "theorem", "algorithm": "greedy", "depth": "1", "h": "20", "ratio": "3/2", "b": "3",
         "epsilon": "1/12", "complete_phases": "0", "complete_epochs": "1", "budget_hit": "0"},
        {"mode": "theorem", "algorithm": "greedy", "depth": "2", "h": "100", "ratio": "2", "b": "3",
         "epsilon": "1/12", "complete_phases": "0", "complete_epochs": "1", "budget_hit": "0"},
    ]
    paths = emit_plot_data(rows, tmp_path / "plots", x="h", log_x=True)
    got = list(csv.DictReader(open(paths["theorem_greedy"])))
    assert [r["h"] for r in got] == ["20", "100"]
    for r in got:
        assert abs(float(r["ln_ln_h"]) - math.log(math.log(int(r["h"])))) < 1e-12


@pytest.mark.parametrize("depth", [1, 2])
@pytest.mark.parametrize("name", sorted(algorithms.ALGORITHMS))
def test_alg_cost_reaches_any_budget(tmp_path, name, depth):
    # ALG cost keeps growing, so a cost cap always ends the run before the request cap
    cfg = lemma(tmp_path, f"{name}{depth}.jsonl", depth=depth, algorithm=name, max_requests=10**5, max_cost="200")
    s = run(cfg, quiet=True).summary
    assert s.stop_reason == "max_cost"
    assert s.alg_cost >= 200
