import csv
import json
import re

import numpy as np
import pytest

from fbgrape import cli, errors


def test_minimal_config_fills_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("task: purification\nseed: 1\n")
    cfg = cli.parse_config(p)
    assert cfg.task_options["nbar"] == 2.0
    assert cfg.task_options["measurements"] == 4
    assert cfg.batch_size == 32


def test_unknown_key_suggests_learning_rate():
    with pytest.raises(errors.ConfigError, match="learning_rate"):
        cli.parse_config(sets=["task=purification", "seed=1", "lr=0.1"])


def test_task_option_override_reaches_the_task():
    cfg = cli.parse_config(sets=["task=stabilize_jc", "seed=0", "kappa_t_m=0.05"])
    assert cli.build_task(cfg).params["kappa_t_m"] == 0.05
    cfg = cli.parse_config(sets=["task=stabilize_jc", "seed=0", "task_options.kappa_t_m=0.07"])
    assert cli.build_task(cfg).params["kappa_t_m"] == 0.07
    with pytest.raises(errors.ConfigError, match="kappa_t_m"):
        cli.parse_config(sets=["task=stabilize_jc", "seed=0", "task_options.kappa_tm=0.07"])


def test_missing_seed_and_task():
    with pytest.raises(errors.ConfigError, match="seed"):
        cli.parse_config(sets=["task=purification"])
    with pytest.raises(errors.ConfigError, match="task"):
        cli.parse_config(sets=["seed=3"])


def test_type_mismatch_and_choices():
    with pytest.raises(errors.ConfigError, match="iterations"):
        cli.parse_config(sets=["task=purification", "seed=1", "iterations=many"])
    with pytest.raises(errors.ConfigError, match="mode"):
        cli.parse_config(sets=["task=purification", "seed=1", "mode=quantum"])


def test_precedence_file_then_set_then_flags(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("task: purification\nseed: 1\nlearning_rate: 0.2\nworkers: 4\n")
    cfg = cli.parse_config(p, sets=["learning_rate=0.3"], flags={"seed": 9, "deterministic": True})
    assert (cfg.learning_rate, cfg.seed, cfg.workers) == (0.3, 9, 1)


def _run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_train_writes_artifacts_deterministically(tmp_path, capsys):
    args = ["train", "--set", "task=purification", "--set", "tiny=true", "--set", "iterations=4",
            "--set", "mode=mc", "--set", "batch_size=8", "--seed", "2", "--deterministic", "--rollouts", "50"]
    code, out, _ = _run(args + ["--out", str(tmp_path / "a")], capsys)
    assert code == 0 and "mean return" in out
    _run(args + ["--out", str(tmp_path / "b")], capsys)
    for name in ("curve.csv", "strategy.json", "tree.json", "wigner_final.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    text = (tmp_path / "a" / "curve.csv").read_text()
    assert text.splitlines()[0] == "iteration,mean_return,std_return,wall_ms"
    assert "\r" not in text
    rows = list(csv.DictReader(text.splitlines()))
    assert len(rows) == 4 and all(float(r["wall_ms"]) == 0.0 for r in rows)
    assert (tmp_path / "a" / "curve.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert (tmp_path / "a" / "wigner_final.png").exists()
    doc = json.loads((tmp_path / "a" / "strategy.json").read_text())
    assert doc["task"] == "purification" and doc["controller"]["kind"] == "table"


def test_wigner_csv_has_axis_comments(tmp_path, capsys):
    _run(["train", "--set", "task=purification", "--set", "tiny=true", "--set", "iterations=1",
          "--set", "wigner_points=11", "--seed", "0", "--out", str(tmp_path)], capsys)
    lines = (tmp_path / "wigner_final.csv").read_text().splitlines()
    assert lines[0].startswith("# x:") and lines[1].startswith("# p:")
    grid = np.loadtxt(tmp_path / "wigner_final.csv", delimiter=",", comments="#")
    assert grid.shape == (11, 11)


def _purity_after_residues(measurements, nbar, cutoff):
    ratio = nbar / (nbar + 1)
    p = ratio ** np.arange(cutoff)
    p /= p.sum()
    mod = 2 ** measurements
    return sum(np.sum(p[r::mod] ** 2) / p[r::mod].sum() for r in range(mod))


def test_eval_analytic_reports_enumerated_impurity(capsys):
    code, out, _ = _run(["eval", "--set", "task=purification", "--set", "controller=analytic", "--seed", "0",
                         "--rollouts", "10"], capsys)
    assert code == 0
    imp = float(re.search(r"impurity: ([0-9.]+)", out).group(1))
    assert imp == pytest.approx(1 - _purity_after_residues(4, 2.0, 40), abs=1e-9)
    assert "exact enumeration" in out


def test_eval_rollouts_override_and_strategy(tmp_path, capsys):
    _run(["train", "--set", "task=continuous_toy", "--set", "iterations=2", "--set", "batch_size=4",
          "--seed", "1", "--out", str(tmp_path), "--rollouts", "20"], capsys)
    code, out, _ = _run(["eval", "--strategy", str(tmp_path / "strategy.json"), "--seed", "1",
                         "--rollouts", "37"], capsys)
    assert code == 0 and "37 rollouts" in out


def test_extract_tree_usage_and_run(tmp_path, capsys):
    with pytest.raises(SystemExit) as ei:
        cli.main(["extract-tree", "--seed", "0"])
    assert ei.value.code == 2
    assert "strategy" in capsys.readouterr().err
    _run(["train", "--set", "task=purification", "--set", "tiny=true", "--set", "iterations=1", "--seed", "0",
          "--out", str(tmp_path / "t")], capsys)
    code, out, _ = _run(["extract-tree", "--strategy", str(tmp_path / "t" / "strategy.json"), "--seed", "0",
                         "--sampled", "--rollouts", "30", "--out", str(tmp_path / "x")], capsys)
    assert code == 0 and "[root]" in out
    doc = json.loads((tmp_path / "x" / "tree.json").read_text())
    assert doc["n_rollouts"] == 30 and doc["root"]["visits"] == 30


def test_config_error_exit_status(capsys):
    code, _, err = _run(["train", "--set", "task=purification", "--set", "lr=1", "--seed", "0"], capsys)
    assert code == 2 and "learning_rate" in err
    code, _, err = _run(["eval", "--set", "task=stabilize_jc", "--seed", "0"], capsys)
    assert code == 2


@pytest.mark.filterwarnings("ignore:outcome with probability")
def test_grad_check_single_task(capsys):
    code, out, _ = _run(["grad-check", "--set", "task=two_outcome_toy", "--seed", "0",
                         "--controllers", "table,recurrent"], capsys)
    assert code == 0
    assert "worst max_rel_error" in out and "ok" in out.splitlines()[-1]


def test_run_defaults_apply_per_task():
    cfg = cli.parse_config(sets=["task=gkp_prep", "seed=0"])
    assert cfg.controller == "recurrent" and cfg.controller_options["input_mode"] == "time"
    cfg = cli.parse_config(sets=["task=gkp_prep", "seed=0", "controller=table"])
    assert cfg.controller == "table"
    assert cli.parse_config(sets=["task=purification", "seed=0"]).learning_rate == 0.1
