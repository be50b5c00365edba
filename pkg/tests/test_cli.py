import csv
import json
from pathlib import Path

import numpy as np
import pytest

from latentwear import fleet
from latentwear.cli import main


def run_cli(args):
    return main([str(a) for a in args])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def states_csv(tmp_path):
    out = tmp_path / "states.csv"
    rc = run_cli(["simulate", "--ships", 25, "--ages", 12, "--engine-types", 2,
                  "--lambda", "0.679,0.274,0.649", "--p21", "0.787",
                  "--p31", "0.794", "--seed", 7, "--out", out,
                  "--out-dir", tmp_path])
    assert rc == 0
    return out


@pytest.fixture
def counts_csv(tmp_path):
    # synthetic raw counts: states plus continuous noise, written by hand
    from latentwear.ctmc import RateParams

    params = RateParams.homogeneous(0.679, 0.274, 0.649, 0.787, 0.794, 12)
    panel = fleet.simulate_panel(params, (20, 12, 2), 0.1, seed=21)
    rng = np.random.default_rng(22)
    counts = panel.states_matrix().astype(float) * 2.0
    counts[counts > 0] += rng.normal(0, 0.3, size=int((counts > 0).sum()))
    counts[panel.states_matrix() == 0] = np.nan
    raw = fleet.FleetPanel(
        [fleet.ShipRecord(r.ship_id, r.engine_type, counts[i])
         for i, r in enumerate(panel.ships)], 12, 2,
    )
    out = tmp_path / "raw.csv"
    fleet.write_panel(raw, out)
    return out


class TestSimulate:
    def test_row_count_and_determinism(self, tmp_path):
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        common = ["simulate", "--ships", 99, "--ages", 31,
                  "--lambda", "0.679,0.274,0.649", "--p21", "0.787",
                  "--p31", "0.794", "--seed", 7, "--out-dir", tmp_path]
        assert run_cli(common + ["--out", a]) == 0
        assert run_cli(common + ["--out", b]) == 0
        rows = read_rows(a)
        assert len(rows) == 1 + 99 * 31
        assert a.read_bytes() == b.read_bytes()

    def test_seed_required(self, tmp_path, capsys):
        rc = run_cli(["simulate", "--ships", 5, "--ages", 4,
                      "--lambda", "0.5,0.2,0.4", "--p21", "0.7", "--p31", "0.7",
                      "--out", tmp_path / "x.csv", "--out-dir", tmp_path])
        assert rc == 2
        assert "--seed" in capsys.readouterr().err

    def test_manifest_written(self, tmp_path):
        run_cli(["simulate", "--ships", 5, "--ages", 4,
                 "--lambda", "0.5,0.2,0.4", "--p21", "0.7", "--p31", "0.7",
                 "--seed", 3, "--out", tmp_path / "x.csv", "--out-dir", tmp_path])
        manifest = json.loads((tmp_path / "run-manifest.json").read_text())
        assert manifest["subcommand"] == "simulate"
        assert manifest["seed"] == 3
        assert manifest["config"]["ships"] == 5


class TestClassify:
    def test_classify_and_thresholds(self, counts_csv, tmp_path):
        out = tmp_path / "st.csv"
        th = tmp_path / "th.json"
        rc = run_cli(["classify", "--in", counts_csv, "--out", out,
                      "--thresholds-out", th, "--out-dir", tmp_path])
        assert rc == 0
        states = fleet.load_state_panel(out)
        observed = states.states_matrix()
        assert set(np.unique(observed)) <= {0, 1, 2, 3}
        meta = json.loads(th.read_text())
        assert meta["b1"] < meta["b2"]
        assert "mean" in meta and "sd" in meta

    def test_missing_input_exits_2(self, tmp_path, capsys):
        rc = run_cli(["classify", "--in", tmp_path / "nope.csv",
                      "--out", tmp_path / "o.csv", "--out-dir", tmp_path])
        assert rc == 2
        assert "nope.csv" in capsys.readouterr().err


class TestFit:
    def test_fit_writes_posterior_and_summary(self, states_csv, tmp_path):
        post = tmp_path / "posterior.csv"
        summ = tmp_path / "summary.json"
        rc = run_cli(["fit", "--in", states_csv, "--chains", 2, "--warmup", 200,
                      "--draws", 256, "--seed", 5, "--out", post,
                      "--summary", summ, "--out-dir", tmp_path])
        assert rc == 0
        rows = read_rows(post)
        assert rows[0] == ["chain", "draw", "lambda1", "lambda2", "lambda3",
                           "p21", "p31"]
        assert len(rows) == 1 + 2 * 256
        payload = json.loads(summ.read_text())
        assert set(payload["params"]) == {"lambda1", "lambda2", "lambda3",
                                          "p21", "p31"}
        assert payload["breaks"] == [12]

    def test_empty_input_exits_2(self, tmp_path, capsys):
        empty = tmp_path / "empty.csv"
        empty.write_text("ship_id,engine_type,age,state\n")
        rc = run_cli(["fit", "--in", empty, "--seed", 1, "--out-dir", tmp_path])
        assert rc == 2
        assert "empty.csv" in capsys.readouterr().err

    def test_fit_deterministic(self, states_csv, tmp_path):
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        for out in (a, b):
            run_cli(["fit", "--in", states_csv, "--chains", 2, "--warmup", 120,
                     "--draws", 128, "--seed", 5, "--out", out,
                     "--summary", tmp_path / "s.json", "--out-dir", tmp_path])
        assert a.read_bytes() == b.read_bytes()


class TestPredict:
    def test_predict_from_explicit_params(self, tmp_path):
        out = tmp_path / "pred.csv"
        rc = run_cli(["predict", "--lambda", "0.679,0.274,0.649", "--p21", "0.787",
                      "--p31", "0.794", "--ages", 31, "--out", out,
                      "--out-dir", tmp_path])
        assert rc == 0
        rows = read_rows(out)
        assert rows[0] == ["age", "d1", "d2", "d3", "predicted_state"]
        assert len(rows) == 32
        d = [float(v) for v in rows[1][1:4]]
        assert d == pytest.approx([0.3856, 0.3060, 0.3084], abs=5e-4)
        assert rows[1][4] == "1"

    def test_predict_from_posterior_csv(self, states_csv, tmp_path):
        post = tmp_path / "posterior.csv"
        run_cli(["fit", "--in", states_csv, "--chains", 2, "--warmup", 150,
                 "--draws", 128, "--seed", 5, "--out", post,
                 "--summary", tmp_path / "s.json", "--out-dir", tmp_path])
        out = tmp_path / "pred.csv"
        rc = run_cli(["predict", "--posterior", post, "--ages", 12,
                      "--out", out, "--out-dir", tmp_path])
        assert rc == 0
        assert len(read_rows(out)) == 13


class TestEvaluate:
    def test_evaluate_outputs(self, states_csv, tmp_path):
        out = tmp_path / "mse.csv"
        occ = tmp_path / "occ.csv"
        rc = run_cli(["evaluate", "--in", states_csv, "--test-size", 5,
                      "--repeats", 4, "--restarts", 2, "--seed", 5,
                      "--out", out, "--occupancy", occ, "--out-dir", tmp_path])
        assert rc == 0
        rows = read_rows(out)
        assert rows[0] == ["repeat", "train_mse", "test_mse"]
        assert len(rows) == 5
        occ_rows = read_rows(occ)
        assert occ_rows[0] == ["age", "state", "fraction"]
        assert len(occ_rows) == 1 + 12 * 3


class TestSbcCommand:
    def test_sbc_outputs(self, tmp_path):
        out = tmp_path / "ranks.csv"
        hist = tmp_path / "hist.json"
        rc = run_cli(["sbc", "--ships", 8, "--ages", 6, "--replications", 20,
                      "--draws-per-rank", 15, "--chains", 2, "--warmup", 100,
                      "--draws", 160, "--bins", 4, "--seed", 13,
                      "--out", out, "--histogram", hist, "--out-dir", tmp_path])
        assert rc == 0
        rows = read_rows(out)
        assert rows[0] == ["replication", "lambda1", "lambda2", "lambda3",
                           "p21", "p31"]
        assert len(rows) == 21
        payload = json.loads(hist.read_text())
        assert "chi2_pvalue" in payload["params"]["lambda1"]


class TestPipeline:
    def test_pipeline_products_and_roundtrip(self, counts_csv, tmp_path):
        out_dir = tmp_path / "run"
        rc = run_cli(["pipeline", "--in", counts_csv, "--chains", 2,
                      "--warmup", 150, "--draws", 128, "--repeats", 3,
                      "--test-size", 4, "--restarts", 2, "--seed", 11,
                      "--out-dir", out_dir])
        assert rc == 0
        for name in ("states.csv", "posterior.csv", "summary.json",
                     "predicted.csv", "mse.csv", "occupancy.csv",
                     "thresholds.json", "run-manifest.json"):
            assert (out_dir / name).exists(), name
        # states.csv is re-ingestible by the consumers
        panel = fleet.load_state_panel(out_dir / "states.csv")
        assert panel.n_ships == 20

    def test_manifest_replay_reproduces_outputs(self, counts_csv, tmp_path):
        out1 = tmp_path / "r1"
        out2 = tmp_path / "r2"
        rc = run_cli(["pipeline", "--in", counts_csv, "--chains", 2,
                      "--warmup", 100, "--draws", 96, "--repeats", 2,
                      "--test-size", 4, "--restarts", 2, "--seed", 11,
                      "--out-dir", out1])
        assert rc == 0
        manifest = out1 / "run-manifest.json"
        rc = run_cli(["pipeline", "--config", manifest, "--out-dir", out2])
        assert rc == 0
        for name in ("states.csv", "posterior.csv", "predicted.csv", "mse.csv"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name

    def test_wrong_manifest_subcommand_rejected(self, counts_csv, tmp_path):
        out1 = tmp_path / "r1"
        run_cli(["simulate", "--ships", 5, "--ages", 4,
                 "--lambda", "0.5,0.2,0.4", "--p21", "0.7", "--p31", "0.7",
                 "--seed", 3, "--out", tmp_path / "x.csv", "--out-dir", out1])
        rc = run_cli(["fit", "--config", out1 / "run-manifest.json",
                      "--out-dir", tmp_path])
        assert rc == 2


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        run_cli(["frobnicate"])
    assert exc.value.code == 2


def test_bad_lambda_count(tmp_path, capsys):
    rc = run_cli(["simulate", "--ships", 5, "--ages", 4, "--lambda", "0.5,0.2",
                  "--p21", "0.7", "--p31", "0.7", "--seed", 3,
                  "--out", tmp_path / "x.csv", "--out-dir", tmp_path])
    assert rc == 2
    assert "--lambda" in capsys.readouterr().err
