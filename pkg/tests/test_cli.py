import json

import numpy as np
import pytest

from continuity.cli import ExperimentConfig, main
from continuity.convergence import read_curve_csv
from continuity.odenet import load_checkpoint
from continuity.systems import SamplingSpec, SystemSpec, irregular_trajectory
from continuity.trajectory import read_csv


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("generate", "--out", root / "train", "--x0", "[[1, 0]]", "--dt", 0.1,
               "--n-points", 200) == 0
    assert run("generate", "--out", root / "val", "--x0", "[[0.5, 0.5]]", "--dt", 0.1,
               "--n-points", 200) == 0
    return root


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig(system="LotkaVolterra", system_params={"a": 2.0},
                           x0=[[1.0, 2.0], [0.5, 0.5]], batch_size=16, seed=4)
    cfg.save(tmp_path / "c.json")
    assert ExperimentConfig.load(tmp_path / "c.json") == cfg


def test_config_file_and_flag_override(tmp_path):
    ExperimentConfig(n_points=7, dt=0.2).save(tmp_path / "c.json")
    assert run("generate", "--config", tmp_path / "c.json", "--out", tmp_path / "o",
               "--n-points", 5) == 0
    tr = read_csv(tmp_path / "o" / "traj0.csv")
    assert len(tr) == 5
    assert tr.regular_spacing() == pytest.approx(0.2)


def test_unknown_config_key_is_usage_error(tmp_path):
    (tmp_path / "c.json").write_text('{"bogus": 1}')
    assert run("generate", "--config", tmp_path / "c.json", "--out", tmp_path) == 1


def test_generate_fencepost_and_determinism(tmp_path):
    assert run("generate", "--out", tmp_path / "a", "--n-points", 100) == 0
    assert run("generate", "--out", tmp_path / "b", "--n-points", 100) == 0
    text = (tmp_path / "a" / "traj0.csv").read_text()
    assert len(text.splitlines()) == 101
    assert text == (tmp_path / "b" / "traj0.csv").read_text()
    manifest = json.loads((tmp_path / "a" / "manifest_generate.json").read_text())
    assert manifest["seed"] == 0 and "numpy" in manifest["versions"]


def test_generate_refuses_overwrite(tmp_path):
    assert run("generate", "--out", tmp_path, "--n-points", 10) == 0
    assert run("generate", "--out", tmp_path, "--n-points", 10) == 1
    assert run("generate", "--out", tmp_path, "--n-points", 10, "--force") == 0


def test_generate_jittered_matches_seed_replay(tmp_path, monkeypatch):
    monkeypatch.setenv("CONTINUITY_SEED", "11")
    assert run("generate", "--out", tmp_path, "--system", "NonlinearPendulum",
               "--dt", 0.05, "--n-points", 40, "--jitter-frac", 0.2, "--skip-prob", 0.1) == 0
    tr = read_csv(tmp_path / "traj0.csv")
    assert np.ptp(tr.gaps) > 0
    assert tr.meta["seed"] == 11
    replay = irregular_trajectory(SystemSpec("NonlinearPendulum"), [1.0, 0.0],
                                  SamplingSpec(**tr.meta["sampling"]))
    np.testing.assert_array_equal(replay.gaps, tr.gaps)


def test_train_linear_checkpoint(data_dirs, tmp_path):
    code = run("train", "--data", data_dirs / "train" / "traj0.csv", "--out", tmp_path,
               "--model-kind", "linear", "--scheme", "Euler")
    assert code == 0
    m = load_checkpoint(tmp_path / "checkpoint.json")
    expected = np.array([[-0.04995835, 0.99833417], [-0.99833417, -0.04995835]])
    np.testing.assert_allclose(m.params.weights[0], expected, atol=1e-3)


def test_train_one_epoch(data_dirs, tmp_path):
    assert run("train", "--data", data_dirs / "train" / "traj0.csv", "--out", tmp_path,
               "--epochs", 1, "--hidden-dim", 4) == 0
    assert len(load_checkpoint(tmp_path / "checkpoint.json").loss_history) == 1


def test_train_missing_file(tmp_path):
    assert run("train", "--data", tmp_path / "missing.csv", "--out", tmp_path) == 1


def test_train_malformed_file(tmp_path):
    (tmp_path / "bad.csv").write_text("t,x0,dt_next\n0,1,0.1\n0,2,\n")
    assert run("train", "--data", tmp_path / "bad.csv", "--out", tmp_path) == 2


def test_bad_subcommand_and_args():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 1


@pytest.mark.parametrize("scheme,verdict", [("Euler", "Fail"), ("RK4", "Pass")])
def test_test_command_verdicts(data_dirs, tmp_path, scheme, verdict):
    assert run("train", "--data", data_dirs / "train" / "traj0.csv", "--out", tmp_path,
               "--model-kind", "linear", "--scheme", scheme) == 0
    assert run("test", "--checkpoint", tmp_path / "checkpoint.json",
               "--val", data_dirs / "val" / "traj0.csv", "--out", tmp_path) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["verdict"] == verdict
    hs, errs = read_curve_csv(tmp_path / "report.csv")
    assert len(hs) == len(report["points"])


def test_exact_field_passes_with_order_slope(data_dirs, tmp_path):
    assert run("test", "--exact-field", "--scheme", "Midpoint", "--metric", "endpoint",
               "--val", data_dirs / "val" / "traj0.csv", "--out", tmp_path, "--jobs", 2) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["verdict"] == "Pass"
    assert abs(report["slope"] - 2) < 0.3


def test_test_needs_one_model_source(data_dirs, tmp_path):
    assert run("test", "--val", data_dirs / "val" / "traj0.csv", "--out", tmp_path) == 1


def test_sindy_and_test(data_dirs, tmp_path):
    assert run("sindy", "--data", data_dirs / "train" / "traj0.csv", "--out", tmp_path,
               "--degree", 2, "--fd-order", 4) == 0
    model = json.loads((tmp_path / "sindy_model.json").read_text())
    assert model["state_dim"] == 2 and model["degree"] == 2 and len(model["terms"]) == 6
    assert run("test", "--sindy-model", tmp_path / "sindy_model.json",
               "--val", data_dirs / "val" / "traj0.csv", "--out", tmp_path) == 0
    assert json.loads((tmp_path / "report.json").read_text())["verdict"] == "Pass"


def test_theory_csv_shares_report_schema(data_dirs, tmp_path):
    assert run("theory", "--lam", -1, "--dt", 0.1, "--p", 1, "--out", tmp_path) == 0
    hs, errs = read_curve_csv(tmp_path / "theory.csv")
    assert (tmp_path / "theory.csv").read_text().splitlines()[0] == "h,error"
    assert errs[0] == pytest.approx(0.0483742, abs=1e-3)
    manifest = json.loads((tmp_path / "manifest_theory.json").read_text())
    assert manifest["w"] == pytest.approx(-0.9516258196, abs=1e-10)


def test_theory_no_root_is_data_error(tmp_path):
    assert run("theory", "--lam", -1, "--dt", 0.8, "--p", 2, "--out", tmp_path) == 2


def test_discover_exhaustion_exit_code(tmp_path):
    assert run("generate", "--out", tmp_path / "d", "--dt", 0.5, "--n-points", 100) == 0
    assert run("generate", "--out", tmp_path / "v", "--dt", 0.5, "--n-points", 100,
               "--x0", "[[0.5, 0.5]]") == 0
    code = run("discover", "--data", tmp_path / "d" / "traj0.csv",
               "--val", tmp_path / "v" / "traj0.csv", "--out", tmp_path / "r",
               "--model-kind", "linear", "--dt", 0.5)
    assert code == 4
    manifest = json.loads((tmp_path / "r" / "manifest_discover.json").read_text())
    assert [h["order"] for h in manifest["history"]] == [1, 2, 4]
    assert (tmp_path / "r" / "checkpoint.json").exists()
