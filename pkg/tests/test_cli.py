import json

import pytest

from phantomgrad import cli

TINY = "d = 8\nn_problems = 2\nk_values = 1, 2\nlambda_values = 0.5, 1.0\nbatch_size = 2\n"


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_precision_sweep_writes_rows_and_manifest(tmp_path, tiny_cfg):
    out = tmp_path / "o"
    assert run("precision-sweep", "--config", tiny_cfg, "--out", out, "--seed", 3) == 0
    lines = (out / "rows.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 2 * 2 * 2
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "precision-sweep" and man["seed"] == 3
    assert man["status"] == {"rows": 16, "failed": 0}
    assert man["config"]["d"] == "8" and man["defaults"]["d"] == "128"
    assert man["started"] and man["finished"] and man["config_hash"]


def test_manifest_replay_is_byte_identical(tmp_path, tiny_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("precision-sweep", "--config", tiny_cfg, "--out", a, "--seed", 5) == 0
    assert run("precision-sweep", "--config", a / "manifest.json", "--out", b) == 0
    assert (a / "rows.csv").read_bytes() == (b / "rows.csv").read_bytes()
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in (a, b))
    assert ma["config_hash"] == mb["config_hash"] and mb["seed"] == 5


def test_worker_count_does_not_change_rows(tmp_path, tiny_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("precision-sweep", "--config", tiny_cfg, "--out", a, "--workers", 1) == 0
    assert run("precision-sweep", "--config", tiny_cfg, "--out", b, "--workers", 2) == 0
    assert (a / "rows.csv").read_bytes() == (b / "rows.csv").read_bytes()


def test_manifest_from_other_command_rejected(tmp_path, tiny_cfg):
    a = tmp_path / "a"
    assert run("precision-sweep", "--config", tiny_cfg, "--out", a) == 0
    assert run("theory-grid", "--config", a / "manifest.json", "--out", tmp_path / "b") == 1


def test_unknown_key_exits_1(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("d = 8\nlamda_values = 0.5\n")
    assert run("precision-sweep", "--config", p, "--out", tmp_path / "o") == 1
    err = capsys.readouterr().err
    assert "line 2" in err and "lamda_values" in err
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("argv", [["precision-sweep", "--workers", "0"], ["nope"], [],
                                  ["fd-check", "--seed", "-1"], ["stability", "--config", "/no/such/file"]])
def test_usage_errors_exit_1(argv, tmp_path):
    code = None
    try:
        code = cli.main(argv + ["--out", str(tmp_path / "o")] if argv and argv[0] != "nope" else argv)
    except SystemExit as exc:
        code = exc.code
    assert code == 1


def test_flagged_rows_exit_2(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("d = 4\nn_problems = 1\nk_values = 1\nlambda_values = 1.0\nkind = linear\n"
                 "u_scale = 1e308\n")
    out = tmp_path / "o"
    assert run("precision-sweep", "--config", p, "--out", out) == 2
    assert json.loads((out / "manifest.json").read_text())["status"]["failed"] == 1


def test_train_bench_keeps_timings_separate(tmp_path):
    p = tmp_path / "b.cfg"
    p.write_text("train.d = 4\ntrain.n_pairs = 8\ntrain.batch_size = 8\ntrain.steps = 3\n"
                 "methods = ift, npg\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("train-bench", "--config", p, "--out", a) == 0
    assert run("train-bench", "--config", p, "--out", b) == 0
    assert (a / "rows.csv").read_bytes() == (b / "rows.csv").read_bytes()
    assert "wall" not in (a / "rows.csv").read_text().splitlines()[0]
    assert (a / "timings.csv").exists()


def test_fd_check_and_theory_grid(tmp_path):
    assert run("fd-check", "--out", tmp_path / "f") == 0
    p = tmp_path / "t.cfg"
    p.write_text("d = 6\nn_problems = 1\nk_values = 1, 4\nlambda_values = 1.0\n")
    assert run("theory-grid", "--config", p, "--out", tmp_path / "t") == 0
    assert run("stability", "--config", p, "--out", tmp_path / "s") == 0
