import csv
import json

from hkserver.cli import config_from_args, build_parser, main


def test_run_and_verify(tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    rc = main(["run", "--mode", "lemma", "--rho", "1", "--depth", "1", "--algorithm", "hoarder",
               "--max-requests", "300", "--trace", str(trace), "--summary", str(tmp_path / "s.json")])
    assert rc == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("mode,depth,b,h,k")
    assert out[1].startswith("lemma,1,21,21,43/2,1/84,hoarder,300,")
    assert main(["verify", str(trace), "--bounds-out", str(tmp_path / "bounds"), "--stride", "50"]) == 0
    lines = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert all(x.get("violations", 0) == 0 for x in lines)
    table = list(csv.DictReader(open(tmp_path / "bounds.csv")))
    assert list(table[0]) == ["prefix_m", "alg_cost", "adv_cost", "opt_cost", "ratio"]
    assert table[-1]["prefix_m"] == "300"
    assert (tmp_path / "bounds.jsonl").read_text().startswith('{"type":"slack"')


def test_verify_exit_codes(tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    main(["run", "--mode", "lemma", "--rho", "1", "--depth", "1", "--max-requests", "50", "--trace", str(trace)])
    recs = [json.loads(x) for x in trace.read_text().splitlines()]
    for r in recs:
        if r["type"] == "request" and r["i"] == 5:
            r["post"] = {k: "7/1" for k in r["post"]}
    bad = tmp_path / "bad.jsonl"
    bad.write_text("".join(json.dumps(r) + "\n" for r in recs))
    assert main(["verify", "--no-replay", str(bad)]) == 1
    junk = tmp_path / "junk.jsonl"
    junk.write_text("{nope\n")
    assert main(["verify", str(junk)]) == 2
    capsys.readouterr()


def test_theorem_degenerate_exit(tmp_path, caplog):
    assert main(["run", "--mode", "theorem", "--h", "100", "--max-requests", "10"]) == 2
    assert "degenerate" in caplog.text
    assert main(["run", "--mode", "theorem", "--h", "100", "--override-b", "3", "--max-requests", "10"]) == 0


def test_config_file_and_override(tmp_path):
    kv = tmp_path / "run.cfg"
    kv.write_text("# comment\nmode = lemma\nrho = 1\ndepth = 2\nalgorithm = dc-tree\nopt = grid=64\nmax-requests = 7\n")
    args = build_parser().parse_args(["run", "--config", str(kv), "--depth", "1", "--opt", "grid=128"])
    cfg = config_from_args(args)
    assert (cfg.mode, cfg.depth, cfg.algorithm, cfg.max_requests) == ("lemma", 1, "dc-tree", 7)
    assert cfg.algorithm_options == {"grid": "128"}
    js = tmp_path / "run.json"
    js.write_text(json.dumps({"mode": "theorem", "h": 20, "override_b": 3, "max_requests": 9}))
    cfg = config_from_args(build_parser().parse_args(["run", "--config", str(js)]))
    assert (cfg.mode, cfg.h, cfg.override_b, cfg.max_requests) == ("theorem", 20, 3, 9)


def test_unknown_config_key(tmp_path, capsys):
    kv = tmp_path / "bad.cfg"
    kv.write_text("colour = blue\n")
    assert main(["run", "--config", str(kv)]) == 2


def test_sweep_and_plot_data(tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    rc = main(["sweep", "--mode", "lemma", "--max-requests", "20", "--grid-depth", "1,2",
               "--grid-b", "3", "--grid-algorithm", "greedy,hoarder", "--out", str(out)])
    assert rc == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 4
    rc = main(["plot-data", str(out), "--out-dir", str(tmp_path / "plots")])
    assert rc == 0
    printed = capsys.readouterr().out
    assert "lemma_greedy" in printed and "lemma_hoarder" in printed
    series = list(csv.DictReader(open(tmp_path / "plots" / "lemma_hoarder.csv")))
    assert [r["depth"] for r in series] == ["1", "2"]


def test_oracle_on_requests(capsys):
    rc = main(["oracle", "--request", "0", "--request", "1", "--request", "0", "--request", "1",
               "--servers", "2", "--depth", "1"])
    assert rc == 0
    assert json.loads(capsys.readouterr().out) == {"requests": 4, "opt": "2/1"}


def test_oracle_on_trace(tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    main(["run", "--mode", "lemma", "--depth", "1", "--override-b", "2", "--max-requests", "10",
          "--trace", str(trace)])
    capsys.readouterr()
    assert main(["oracle", "--trace", str(trace), "--compare-adv"]) == 0
    out = json.loads(capsys.readouterr().out)
    from hkserver.rational import parse

    assert parse(out["opt"]) <= parse(out["adv"])


def test_oracle_budget(capsys):
    args = ["oracle", "--servers", "4"] + sum((["--request", str(i)] for i in range(3)), [])
    assert main(args) == 2
