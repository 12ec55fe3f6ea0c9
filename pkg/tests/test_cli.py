"""Command-line round trips: every command on small simulated cohorts."""
import re
import subprocess
import sys

import numpy as np
import pytest

from mixcourse import cli
from mixcourse import io as mio

FAST = ["--iters", "150", "--burnin", "0.8"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert cli.main(["simulate", "--scenario", "scenario_2_2", "--n-patients", "100", "--seed", "7",
                     "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def fit_run(sim_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    import contextlib
    import io
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli.main(["fit", "--data", str(sim_dir / "data.csv"), "--clusters", "1,2", "--seed", "3",
                         "--out", str(out), "--trace", *FAST])
    return code, buf.getvalue(), out


class TestSimulate:
    def test_rows_and_determinism(self, sim_dir, tmp_path, capsys):
        header, rows = mio.read_csv(sim_dir / "data.csv")
        assert header == ["patient_id", "time", "motor", "memory"] and len(rows) == 600
        code, _, _ = run(capsys, "simulate", "--scenario", "scenario_2_2", "--n-patients", 100, "--seed", 7,
                         "--out", tmp_path)
        assert code == 0
        for name in ("data.csv", "truth.csv", "truth_clusters.csv"):
            assert (tmp_path / name).read_bytes() == (sim_dir / name).read_bytes()

    def test_multi_labels(self, tmp_path, capsys):
        assert run(capsys, "simulate", "--scenario", "scenario_multi", "--n-patients", 50, "--seed", 1,
                   "--out", tmp_path)[0] == 0
        _, labels, _ = mio.read_truth(tmp_path / "truth.csv")
        assert set(labels.tolist()) == {0, 1, 2}

    def test_seed_required(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            cli.main(["simulate", "--scenario", "scenario_2_2", "--out", str(tmp_path)])
        assert exc.value.code == 2

    def test_unknown_scenario(self, tmp_path):
        with pytest.raises(SystemExit):
            cli.main(["simulate", "--scenario", "nope", "--seed", "1", "--out", str(tmp_path)])


class TestFit:
    def test_summary_shape(self, fit_run):
        code, out, _ = fit_run
        assert code == 0
        assert "cluster summaries (tau, xi, w_motor, w_memory):" in out
        tuples = re.findall(r"\((-?\d+\.\d\d), (-?\d+\.\d\d), (-?\d+\.\d\d), (-?\d+\.\d\d)\)", out)
        assert len(tuples) >= 1

    def test_entropy_reported(self, fit_run):
        _, out, _ = fit_run
        value = float(re.search(r"normalized entropy: ([0-9.]+)", out).group(1))
        assert 0.0 <= value <= 1.0

    def test_icl_argmin_selected(self, fit_run):
        _, out, path = fit_run
        header, rows = mio.read_csv(path / "icl.csv")
        assert header == ["k", "icl", "selected"]
        table = {int(r[0]): float(r[1]) for r in rows}
        chosen = min(table, key=table.get)
        assert [int(r[0]) for r in rows if r[2] == "1"] == [chosen]
        assert f"selected k = {chosen}" in out
        assert re.search(rf"k={chosen}: -?\d+\.\d+  <- selected", out)

    def test_outputs_reparse(self, fit_run, sim_dir):
        _, _, path = fit_run
        model = mio.load_model(path / "model.json")
        ids, probs, labels = mio.read_membership(path / "membership.csv")
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-10)
        assert np.array_equal(probs, model.membership)
        header, rows = mio.read_csv(path / "clusters.csv")
        assert header == ["cluster", "proportion", "tau", "xi", "w_motor", "w_memory"]
        assert len(rows) == model.n_clusters
        header, rows = mio.read_csv(path / "trace.csv")
        assert header[:2] == ["iteration", "loglik"] and len(rows) == 150
        assert all(np.isfinite(float(r[1])) for r in rows)

    def test_model_round_trip(self, fit_run, tmp_path):
        _, _, path = fit_run
        model = mio.load_model(path / "model.json")
        mio.save_model(tmp_path / "again.json", model)
        assert (tmp_path / "again.json").read_bytes() == (path / "model.json").read_bytes()

    def test_two_clusters_membership(self, sim_dir, tmp_path, capsys):
        code, out, _ = run(capsys, "fit", "--data", sim_dir / "data.csv", "--clusters", 2, "--seed", 3,
                           "--out", tmp_path, *FAST)
        assert code == 0 and out.count("cluster ") >= 2
        _, probs, _ = mio.read_membership(tmp_path / "membership.csv")
        assert probs.shape[1] == 2 and np.allclose(probs.sum(axis=1), 1.0, atol=1e-10)

    def test_bit_reproducible(self, sim_dir, tmp_path, capsys):
        for sub in ("a", "b"):
            assert run(capsys, "fit", "--data", sim_dir / "data.csv", "--clusters", 2, "--seed", 5,
                       "--iters", 60, "--out", tmp_path / sub)[0] == 0
        for name in ("model.json", "membership.csv", "clusters.csv", "icl.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestOtherCommands:
    def test_personalize(self, fit_run, sim_dir, tmp_path, capsys):
        _, _, path = fit_run
        code, _, _ = run(capsys, "personalize", "--model", path / "model.json", "--data", sim_dir / "data.csv",
                         "--iters", 60, "--out", tmp_path)
        assert code == 0
        header, rows = mio.read_csv(tmp_path / "personalized.csv")
        assert header[:3] == ["patient_id", "tau", "xi"] and len(rows) == 100

    def test_classify_posthoc(self, sim_dir, tmp_path, capsys):
        code, out, _ = run(capsys, "classify-posthoc", "--data", sim_dir / "data.csv", "--clusters", 2,
                           "--out", tmp_path, *FAST)
        assert code == 0 and out.count("cluster ") == 2
        _, probs, _ = mio.read_membership(tmp_path / "membership.csv")
        assert np.allclose(probs.sum(axis=1), 1.0)

    def test_select(self, sim_dir, tmp_path, capsys):
        code, out, _ = run(capsys, "select", "--data", sim_dir / "data.csv", "--clusters", "2",
                           "--out", tmp_path, "--iters", 60)
        assert code == 0 and "selected k = 2" in out

    def test_evaluate_perfect(self, sim_dir, tmp_path, capsys):
        ids, labels, _ = mio.read_truth(sim_dir / "truth.csv")
        mio.write_membership(tmp_path / "pred.csv", ids, np.eye(2)[labels])
        code, _, _ = run(capsys, "evaluate", "--truth", sim_dir / "truth.csv", "--pred", tmp_path / "pred.csv",
                         "--out", tmp_path / "ev")
        assert code == 0
        _, rows = mio.read_csv(tmp_path / "ev" / "table2.csv")
        table = {(r[0], r[1]): float(r[2]) for r in rows}
        assert table[("accuracy", "")] == 1.0 and table[("entropy", "")] == 0.0
        _, conf = mio.read_csv(tmp_path / "ev" / "confusion.csv")
        assert [[float(x) for x in r[1:]] for r in conf] == [[1.0, 0.0], [0.0, 1.0]]

    def test_evaluate_relabelled_and_curves(self, fit_run, sim_dir, tmp_path, capsys):
        _, _, path = fit_run
        ids, labels, _ = mio.read_truth(sim_dir / "truth.csv")
        # swapped labels still score perfectly after alignment
        mio.write_membership(tmp_path / "pred.csv", ids, np.eye(2)[1 - labels])
        model2 = path / "model_k2.json"
        code, _, _ = run(capsys, "evaluate", "--truth", sim_dir / "truth.csv", "--pred", tmp_path / "pred.csv",
                         "--model", model2, "--out", tmp_path / "ev")
        assert code == 0
        _, rows = mio.read_csv(tmp_path / "ev" / "table2.csv")
        assert float(rows[0][2]) == 1.0
        header, curves = mio.read_csv(tmp_path / "ev" / "curves.csv")
        assert header == ["curve", "time", "motor", "memory"]
        assert {r[0] for r in curves} == {"cluster_1", "cluster_2", "population"}

    def test_evaluate_misaligned_ids(self, sim_dir, tmp_path, capsys):
        ids, labels, _ = mio.read_truth(sim_dir / "truth.csv")
        mio.write_membership(tmp_path / "pred.csv", ids[:-1] + ("intruder",), np.eye(2)[labels])
        code, _, err = run(capsys, "evaluate", "--truth", sim_dir / "truth.csv", "--pred", tmp_path / "pred.csv",
                           "--out", tmp_path / "ev")
        assert code == 2 and "intruder" in err and ids[-1] in err

    def test_evaluate_study(self, tmp_path, capsys):
        code, out, _ = run(capsys, "evaluate", "--scenario", "scenario_2_2", "--replicates", 2,
                           "--n-patients", 50, "--iters", 80, "--out", tmp_path)
        assert code == 0 and "mixture: accuracy" in out
        for name in ("table2_mixture.csv", "table3_posthoc.csv", "confusion_mixture.csv", "curves_truth.csv"):
            mio.read_csv(tmp_path / name)
        header, rows = mio.read_csv(tmp_path / "table3_mixture.csv")
        assert header == ["parameter", "true", "estimate", "bias", "se", "rmse"]


class TestExitCodes:
    def test_input_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("patient_id,time,a,b\np1,1,x,0.5\n")
        code, _, err = run(capsys, "fit", "--data", bad, "--clusters", 2, "--seed", 1, "--out", tmp_path)
        assert code == 2 and "row 2, column 'a'" in err

    def test_io_error(self, sim_dir, tmp_path, capsys):
        blocker = tmp_path / "blocker"
        blocker.write_text("")
        code, _, err = run(capsys, "simulate", "--scenario", "scenario_2_2", "--n-patients", 5, "--seed", 1,
                           "--out", blocker / "sub")
        assert code == 4 and "blocker" in err
        code, _, _ = run(capsys, "fit", "--data", tmp_path / "missing.csv", "--clusters", 2, "--seed", 1,
                         "--out", tmp_path)
        assert code == 4

    def test_divergence(self, sim_dir, tmp_path, capsys, monkeypatch):
        from mixcourse.saem import FitDivergenceError

        def boom(*a, **k):
            raise FitDivergenceError("synthetic", {"iteration": 7})
        monkeypatch.setattr(cli, "fit", boom)
        code, _, err = run(capsys, "fit", "--data", sim_dir / "data.csv", "--clusters", 2, "--seed", 1,
                           "--out", tmp_path)
        assert code == 3 and "iteration" in err
        import mixcourse.evaluation as ev
        monkeypatch.setattr(ev, "fit", boom)
        code, _, _ = run(capsys, "fit", "--data", sim_dir / "data.csv", "--clusters", "2,3", "--seed", 1,
                         "--out", tmp_path)
        assert code == 3

    def test_console_script_and_log_env(self, sim_dir, tmp_path):
        env = {"MIXCOURSE_LOG": "DEBUG", "PATH": "/usr/bin:/bin"}
        proc = subprocess.run([sys.executable, "-m", "mixcourse.cli", "simulate", "--scenario", "scenario_2_2",
                               "--n-patients", "5", "--seed", "1", "--out", str(tmp_path)],
                              capture_output=True, text=True, env=env)
        assert proc.returncode == 0 and "wrote 30 rows" in proc.stdout
