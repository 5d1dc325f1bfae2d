import csv
import io

import pytest
import yaml

from hpc_locomotion import __version__
from hpc_locomotion.cli import main
from hpc_locomotion.student import InferenceBundle, load_bundle


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_noise_probe_prints_five_rows(capsys):
    code, out, _ = run(capsys, "noise-probe", "--n", 5)
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0][0].startswith("scan_") and len(rows) == 6
    assert all(len(r) == len(rows[0]) for r in rows)
    assert len({tuple(r) for r in rows[1:]}) == 5


def test_training_requires_seed(capsys, tmp_path):
    code, _, err = run(capsys, "train-oracle", "--out", tmp_path)
    assert code == 2
    assert "usage:" in err and "--seed" in err


def test_eval_without_checkpoints_names_the_missing_one(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--checkpoints", tmp_path, "--variants", "student", "--out", tmp_path / "e")
    assert code == 1
    assert "missing checkpoint" in err and "'student'" in err


def test_bad_config_reports_line_and_exits_2(capsys, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("ppo:\n  envs: 4\n  horizn: 8\n")
    code, _, err = run(capsys, "train-oracle", "--seed", 0, "--config", bad, "--out", tmp_path / "o")
    assert code == 2
    assert f"{bad}:3: ppo.horizn: unknown key" in err


def test_unknown_subcommand_exits_nonzero(capsys):
    assert run(capsys, "fly")[0] == 2


def test_pipeline_outputs_are_self_describing(capsys, tmp_path, tiny_config):
    teach, stud = tmp_path / "teacher", tmp_path / "student"
    code, out, err = run(capsys, "train-oracle", "--seed", 3, "--config", tiny_config, "--out", teach,
                         "--families", "flat")
    assert code == 0, err
    meta = yaml.safe_load((teach / "run.yaml").read_text())
    assert meta["seed"] == 3 and meta["version"] == __version__
    resolved = yaml.safe_load((teach / "config.yaml").read_text())
    assert resolved["ppo"]["envs"] == 4 and resolved["ppo"]["gamma"] == 0.99
    assert (teach / "teacher.bin").exists() and (teach / "metrics.csv").exists()

    code, _, err = run(capsys, "distill", "--seed", 1, "--config", tiny_config, "--teacher", teach / "teacher.bin",
                       "--out", stud, "--families", "flat")
    assert code == 0, err
    assert (stud / "student.bin").exists() and (stud / "config.yaml").exists()

    code, _, err = run(capsys, "export", "--student", stud / "student.bin", "--out", tmp_path / "bundle.bin")
    assert code == 0, err
    assert isinstance(load_bundle(tmp_path / "bundle.bin"), InferenceBundle)

    code, out, err = run(capsys, "eval", "--config", tiny_config, "--variants", "oracle,student",
                         "--checkpoint", f"oracle={teach / 'teacher.bin'}", "--checkpoints", tmp_path,
                         "--out", tmp_path / "eval", "--no-plots")
    assert code == 0, err
    assert "noise 0%" in out and "noise 200%" in out
    assert (tmp_path / "eval" / "table.csv").exists() and (tmp_path / "eval" / "run.yaml").exists()


def test_distill_without_teacher_is_a_usage_error(capsys, tmp_path, tiny_config):
    code, _, err = run(capsys, "distill", "--seed", 0, "--config", tiny_config, "--out", tmp_path)
    assert code == 2 and "--teacher" in err


def test_workers_must_be_positive(capsys, tmp_path):
    code, _, err = run(capsys, "noise-probe", "--workers", 0)
    assert code == 2 and "--workers" in err


def test_sim_trace_writes_csv(capsys, tmp_path):
    out = tmp_path / "trace.csv"
    code, _, _ = run(capsys, "sim-trace", "--steps", 20, "--out", out)
    assert code == 0
    rows = list(csv.reader(out.open()))
    assert 1 < len(rows) <= 21


@pytest.mark.parametrize("flag", ["--version"])
def test_version_flag(capsys, flag):
    code, out, _ = run(capsys, flag)
    assert code == 0 and __version__ in out
