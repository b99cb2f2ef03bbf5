import json
from dataclasses import asdict

import numpy as np
import pytest

from sttis.cli import main, pearson
from sttis.errors import DataError
from sttis.graph import RegionGraph
from sttis.ingest import FlowSeries, TRIP_HEADER, check_metadata, fit_scale, flow_metadata, read_flows, write_flows
from sttis.model import STTIS, ModelConfig

SMALL_CONFIG = {
    "split": {"train_days": 10, "test_days": 3, "val_fraction": 0.2},
    "model": {"d": 6, "alpha": 2, "heads_dli": 2, "heads_dlm": 2, "q_recipe": [3, 2, 0]},
    "train": {"epochs": 2, "batch_size": 32, "lr": 0.003, "seed": 1},
}


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Synthetic flows, a graph and a briefly trained model shared by the read-only tests."""
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(SMALL_CONFIG))
    assert run("synth", "--n", 9, "--days", 14, "--seed", 1, "--out", d / "flows", "--config", d / "cfg.json") == 0
    assert run("graph", "--flows", d / "flows", "--out", d / "g" / "graph.json", "--config", d / "cfg.json") == 0
    assert run("train", "--flows", d / "flows", "--graph", d / "g" / "graph.json", "--out", d / "m",
               "--config", d / "cfg.json") == 0
    return d


def model_args(d):
    return ["--model", d / "m" / "model.ckpt", "--flows", d / "flows", "--graph", d / "g" / "graph.json"]


# synth / ingest ----------------------------------------------------------------------

def test_synth_writes_full_table(tmp_path):
    assert run("synth", "--n", 36, "--days", 60, "--seed", 0, "--out", tmp_path / "a") == 0
    lines = (tmp_path / "a" / "flows.csv").read_text().splitlines()
    assert len(lines) == 1 + 36 * 60 * 48
    meta = json.loads((tmp_path / "a" / "meta.json").read_text())
    check_metadata(meta)
    assert (meta["rows"], meta["cols"]) == (6, 6)
    assert json.loads((tmp_path / "a" / "config.json").read_text())["grid"]["rows"] == 6


def test_synth_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--n", 6, "--days", 2, "--seed", 9, "--out", tmp_path / name) == 0
    assert (tmp_path / "a" / "flows.csv").read_bytes() == (tmp_path / "b" / "flows.csv").read_bytes()
    assert json.loads((tmp_path / "a" / "meta.json").read_text())["rows"] == 2


def write_ingest_fixture(tmp_path, rows):
    (tmp_path / "cfg.json").write_text(json.dumps({
        "grid": {"rows": 2, "cols": 2, "bbox": [0.0, 2.0, 0.0, 2.0], "slot_minutes": 30, "origin": 0},
    }))
    (tmp_path / "trips.csv").write_text(",".join(TRIP_HEADER) + "\n" + "\n".join(rows) + "\n")


def test_ingest_creates_flows_and_metadata(tmp_path):
    write_ingest_fixture(tmp_path, ["0.5,0.5,1.5,1.5,0,1900", "1.5,0.5,0.5,1.5,1800,3700"])
    assert run("ingest", "--trips", tmp_path / "trips.csv", "--config", tmp_path / "cfg.json",
               "--out", tmp_path / "out") == 0
    flows, meta = read_flows(tmp_path / "out")
    assert flows.num_slots == 3 and meta["n"] == 4
    assert flows.outflow[0, 0] == 1 and flows.inflow[1, 3] == 1
    assert flows.outflow[1, 2] == 1 and flows.inflow[2, 1] == 1
    assert (tmp_path / "out" / "config.json").exists()


def test_ingest_missing_file_exits_2(tmp_path, capsys):
    write_ingest_fixture(tmp_path, [])
    code = run("ingest", "--trips", tmp_path / "nope.csv", "--config", tmp_path / "cfg.json", "--out", tmp_path / "o")
    assert code == 2
    assert "nope.csv" in capsys.readouterr().err


def test_ingest_malformed_rows_exit_3(tmp_path):
    write_ingest_fixture(tmp_path, ["0.5,0.5,1.5,1.5,0,1900"] * 50 + ["garbage"])
    assert run("ingest", "--trips", tmp_path / "trips.csv", "--config", tmp_path / "cfg.json",
               "--out", tmp_path / "o") == 3


def test_unknown_config_key_exits_2(tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps({"train": {"epoch": 3}}))
    assert run("synth", "--n", 4, "--days", 1, "--out", tmp_path / "o", "--config", tmp_path / "cfg.json") == 2
    assert "epoch" in capsys.readouterr().err


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["graph"])
    assert exc.value.code == 2


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        main(["synth", "--help"])
    assert "default: 0" in capsys.readouterr().out


# graph --------------------------------------------------------------------------------

def test_graph_for_two_hundred_regions(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"split": {"train_days": 2, "test_days": 1, "val_fraction": 0.5}}))
    assert run("synth", "--n", 200, "--days", 3, "--out", tmp_path / "f", "--config", cfg) == 0
    for name in ("a.json", "b.json"):
        assert run("graph", "--flows", tmp_path / "f", "--seed", 4, "--out", tmp_path / name,
                   "--config", cfg, "--validate") == 0
    out = capsys.readouterr().out
    assert "result          PASS" in out
    doc = json.loads((tmp_path / "a.json").read_text())
    assert len(doc["hubs"]) == 14 and doc["seed"] == 4
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_graph_echo_reproduces_output(workdir, tmp_path):
    echo = workdir / "g" / "config.json"
    assert run("graph", "--flows", workdir / "flows", "--out", tmp_path / "graph.json", "--config", echo) == 0
    assert (tmp_path / "graph.json").read_bytes() == (workdir / "g" / "graph.json").read_bytes()


def test_graph_validation_failure_exits_3(tmp_path, monkeypatch):
    import sttis.cli as cli

    def bad_graph(sim, seed=0):
        return RegionGraph.from_edges(sim.n, [(i, i + 1) for i in range(sim.n - 1)])

    monkeypatch.setattr(cli, "build_graph", bad_graph)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"split": {"train_days": 2, "test_days": 1, "val_fraction": 0.5}}))
    assert run("synth", "--n", 6, "--days", 3, "--out", tmp_path / "f") == 0
    assert run("graph", "--flows", tmp_path / "f", "--out", tmp_path / "g.json", "--config", cfg, "--validate") == 3


# train / evaluate / predict ---------------------------------------------------------------

def test_train_outputs(workdir):
    assert (workdir / "m" / "model.ckpt").exists()
    log = (workdir / "m" / "epochs.csv").read_text().splitlines()
    assert log[0] == "epoch,train_loss,val_loss,seconds" and len(log) == 3
    echo = json.loads((workdir / "m" / "config.json").read_text())
    assert echo["train"]["epochs"] == 2 and echo["model"]["q_recipe"] == [3, 2, 0]


def test_same_seed_same_metrics(workdir, tmp_path, capsys):
    cfg = workdir / "cfg.json"
    assert run("train", "--flows", workdir / "flows", "--graph", workdir / "g" / "graph.json",
               "--out", tmp_path / "m2", "--config", cfg) == 0
    assert (tmp_path / "m2" / "model.ckpt").read_bytes() == (workdir / "m" / "model.ckpt").read_bytes()
    capsys.readouterr()
    assert run("evaluate", *model_args(workdir), "--config", cfg, "--out", tmp_path / "e1") == 0
    args = model_args(workdir)
    args[1] = tmp_path / "m2" / "model.ckpt"
    assert run("evaluate", *args, "--config", cfg, "--out", tmp_path / "e2") == 0
    first = json.loads((tmp_path / "e1" / "metrics.json").read_text())
    assert first == json.loads((tmp_path / "e2" / "metrics.json").read_text())
    assert first["model"]["n_samples"] > 0 and first["ha"]["rmse_in"] > 0


def test_evaluate_perfect_copy_checkpoint(tmp_path, capsys):
    n, o, days = 4, 48, 14
    flows = FlowSeries(np.full((days * o, n), 12.0), np.full((days * o, n), 20.0))
    write_flows(tmp_path / "f", flows, flow_metadata(flows, 2, 2, 30, None))
    graph = RegionGraph.from_edges(4, [(0, 1), (1, 2), (2, 3), (3, 0)])
    graph.save(tmp_path / "graph.json")
    cfg = ModelConfig(n=n, o=o, d=4, q_recipe=(2, 1, 0))
    model = STTIS(cfg, graph, seed=0, meta={"scale": asdict(fit_scale(flows, range(0, 8 * o)))})
    model.store["pred.W_P"].data[:] = 0.0
    model.store["pred.b_P"].data[:] = 0.0  # predicts the (constant) training minimum
    model.save(tmp_path / "perfect.ckpt")
    (tmp_path / "cfg.json").write_text(json.dumps({"split": {"train_days": 10, "test_days": 3, "val_fraction": 0.2}}))
    assert run("evaluate", "--model", tmp_path / "perfect.ckpt", "--flows", tmp_path / "f",
               "--graph", tmp_path / "graph.json", "--config", tmp_path / "cfg.json") == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["model"]["rmse_in"] == 0.0 and doc["model"]["rmse_out"] == 0.0 and doc["model"]["mape_in"] == 0.0


def test_predict_writes_original_units(workdir, tmp_path):
    out = tmp_path / "p" / "pred.csv"
    assert run("predict", *model_args(workdir), "--slot", 600, "--out", out) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "region,inflow_hat,outflow_hat" and len(lines) == 10
    values = np.array([[float(x) for x in line.split(",")[1:]] for line in lines[1:]])
    assert np.all(values >= 0) and values.max() > 1.0  # counts, not normalized values


@pytest.mark.parametrize("slot", [5, 10_000, -1])
def test_predict_without_context_fails(workdir, slot, capsys):
    assert run("predict", *model_args(workdir), "--slot", slot) == 4
    assert "slot" in capsys.readouterr().err


def test_corrupt_checkpoint_exits_3(workdir, tmp_path):
    args = model_args(workdir)
    (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
    args[1] = tmp_path / "bad.ckpt"
    assert run("predict", *args, "--slot", 600) == 3


# attention ------------------------------------------------------------------------------

def test_attention_rows_are_distributions(tmp_path):
    n, o, days = 9, 48, 12
    flows = FlowSeries(np.random.default_rng(0).uniform(0, 40, (days * o, n)),
                       np.random.default_rng(1).uniform(0, 40, (days * o, n)))
    write_flows(tmp_path / "f", flows, flow_metadata(flows, 3, 3, 30, None))
    graph = RegionGraph.from_edges(9, [(i, (i + 1) % 9) for i in range(9)] + [(0, 4), (2, 7)])
    graph.save(tmp_path / "graph.json")
    model = STTIS(ModelConfig(n=n, o=o), graph, seed=0, meta={"scale": asdict(fit_scale(flows, range(0, 8 * o)))})
    model.save(tmp_path / "m.ckpt")
    args = ["--model", tmp_path / "m.ckpt", "--flows", tmp_path / "f", "--graph", tmp_path / "graph.json"]
    assert run("attention", *args, "--slot", 500, "--out", tmp_path / "att") == 0

    dli = np.loadtxt(tmp_path / "att" / "dli_attention.csv", delimiter=",", skiprows=1)
    assert (tmp_path / "att" / "dli_attention.csv").read_text().startswith("head,layer,src,dst,score\n")
    edges = set(map(tuple, np.array(graph.edges()).tolist()))
    assert all((min(s, t), max(s, t)) in edges for s, t in dli[:, 2:4].astype(int))
    for head in range(6):
        for layer in range(3):
            for region in range(n):
                rows = dli[(dli[:, 0] == head) & (dli[:, 1] == layer) & (dli[:, 2] == region)]
                assert len(rows) == len(graph.adjacency[region])
                assert rows[:, 4].sum() == pytest.approx(1.0, abs=1e-6)

    dlm = np.loadtxt(tmp_path / "att" / "dlm_attention.csv", delimiter=",", skiprows=1)
    for head in range(6):
        for region in range(n):
            rows = dlm[(dlm[:, 0] == head) & (dlm[:, 1] == region)]
            assert len(rows) == 16
            assert rows[:, 3].sum() == pytest.approx(1.0, abs=1e-6)
    assert set(dlm[:, 2].astype(int)) == {500 - lag for lag in list(range(1, 7)) + [48 * j for j in range(1, 11)]}

    assert run("attention", *args, "--slot", 500, "--region", 4, "--out", tmp_path / "r") == 0
    sub = np.loadtxt(tmp_path / "r" / "dli_attention.csv", delimiter=",", skiprows=1)
    assert np.all((sub[:, 2] == 4) | (sub[:, 3] == 4))
    assert set(np.loadtxt(tmp_path / "r" / "dlm_attention.csv", delimiter=",", skiprows=1)[:, 1]) == {4}
    assert run("attention", *args, "--slot", 100, "--out", tmp_path / "x") == 4


# correlate ----------------------------------------------------------------------------------

def write_matrix(path, m):
    np.savetxt(path, np.atleast_2d(m), delimiter=",")
    return path


def test_correlate(tmp_path, capsys):
    a = np.array([[1.0, 2.0], [3.0, 5.0]])
    write_matrix(tmp_path / "a.csv", a)
    write_matrix(tmp_path / "neg.csv", -a)
    write_matrix(tmp_path / "x.csv", [1, 2, 3])
    write_matrix(tmp_path / "y.csv", [1, 2, 4])
    for other, expected in (("a.csv", "1.0000"), ("neg.csv", "-1.0000")):
        assert run("correlate", "--a", tmp_path / "a.csv", "--b", tmp_path / other) == 0
        assert capsys.readouterr().out.strip() == expected
    assert run("correlate", "--a", tmp_path / "x.csv", "--b", tmp_path / "y.csv") == 0
    assert capsys.readouterr().out.strip() == "0.9820"


def test_correlate_errors(tmp_path):
    write_matrix(tmp_path / "c.csv", [2, 2, 2])
    write_matrix(tmp_path / "x.csv", [1, 2, 3])
    write_matrix(tmp_path / "w.csv", [1, 2, 3, 4])
    assert run("correlate", "--a", tmp_path / "c.csv", "--b", tmp_path / "x.csv") == 3
    assert run("correlate", "--a", tmp_path / "w.csv", "--b", tmp_path / "x.csv") == 3
    with pytest.raises(DataError):
        pearson(np.ones(3), np.arange(3))
