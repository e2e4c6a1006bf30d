import hashlib
import subprocess
import sys

import numpy as np
import pytest

from zhyper.cli import read_config, run_command
from zhyper.numerics import save_tensor
from zhyper.training import load_run


def tree_hash(path):
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(path)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.cfg"
    cfg.write_text("# tiny run\nsteps = 4\nbatch_size = 4\nmax_lr = 1e-3\nn_train = 32\nn_eval = 8\nseq_len = 8\n")
    assert run_command(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert run_command(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root, cfg


def test_params_mtl(capsys):
    assert run_command(["params", "--preset", "ref-7b", "--rank", "8", "--method", "mtl"]) == 0
    out = capsys.readouterr().out
    assert "3,407,872" in out and "3.41M" in out


def test_params_table_and_csv(tmp_path, capsys):
    assert run_command(["params", "--out", str(tmp_path / "b.csv")]) == 0
    out = capsys.readouterr().out
    assert "13.63M" in out and "zhyper-square" in out
    assert "t2l,8,total,55374336" in (tmp_path / "b.csv").read_text()


def test_check_exits_zero(capsys):
    assert run_command(["check"]) == 0
    assert capsys.readouterr().out.count("PASS") == 6


def test_usage_errors(capsys):
    assert run_command([]) == 1
    assert run_command(["train"]) == 1
    assert run_command(["params", "--preset", "nope"]) == 1
    assert run_command(["params", "--rank", "eight"]) == 1
    assert "error" in capsys.readouterr().err


def test_missing_input_is_validation_error(tmp_path):
    assert run_command(["eval", "--run", str(tmp_path / "none"), "--data", str(tmp_path)]) == 1


def test_train_flags_override_config(workspace):
    root, cfg = workspace
    _, tcfg, state = load_run(root / "run")
    assert tcfg.steps == 4 and tcfg.batch_size == 4 and state.step == 4
    out = root / "run_sq"
    assert run_command(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(out),
                        "--variant", "square", "--steps", "2", "--rank", "2"]) == 0
    _, tcfg, _ = load_run(out)
    assert (tcfg.mode, tcfg.steps, tcfg.rank) == ("zhyper-square", 2, 2)


def test_manifest_records_hashes(workspace):
    root, _ = workspace
    text = (root / "run" / "run_manifest.txt").read_text()
    assert "command = train" in text and "seed = 0" in text
    want = hashlib.sha256((root / "run" / "loss_trace.csv").read_bytes()).hexdigest()
    assert f"sha256 loss_trace.csv = {want}" in text


def test_adapter_eval_matches_context_eval(workspace, capsys):
    root, _ = workspace
    data, run = str(root / "data"), str(root / "run")
    adapter = str(root / "cyclic.zadp")
    before = tree_hash(root / "data"), tree_hash(root / "run")
    assert run_command(["gen-adapter", "--run", run, "--data", data, "--context-id", "cyclic/d2",
                        "--out", adapter]) == 0
    capsys.readouterr()
    assert run_command(["eval", "--run", run, "--data", data, "--adapter", adapter]) == 0
    a = capsys.readouterr().out
    assert run_command(["eval", "--run", run, "--data", data, "--context-id", "cyclic/d2"]) == 0
    b = capsys.readouterr().out

    def losses(text):
        return np.array([float(line.split(",")[1]) for line in text.splitlines()[2:]])

    assert np.abs(losses(a) - losses(b)).max() <= 1e-10
    assert (tree_hash(root / "data"), tree_hash(root / "run")) == before


def test_gen_adapter_from_embedding_file(workspace, tmp_path):
    root, _ = workspace
    save_tensor(tmp_path / "c.ztsr", np.ones(32))
    assert run_command(["gen-adapter", "--run", str(root / "run"), "--embedding", str(tmp_path / "c.ztsr"),
                        "--out", str(tmp_path / "a.zadp")]) == 0
    assert (tmp_path / "a.zadp").stat().st_size > 0
    assert run_command(["gen-adapter", "--run", str(root / "run"), "--out", str(tmp_path / "b.zadp")]) == 1


def test_eval_grid(workspace, capsys):
    root, _ = workspace
    assert run_command(["eval", "--run", str(root / "run"), "--data", str(root / "data"),
                        "--out", str(root / "ev")]) == 0
    assert "z=ones" in capsys.readouterr().out
    rows = (root / "ev" / "eval.csv").read_text().splitlines()
    assert rows[0] == "context,context_task,unigram,cyclic,copy" and len(rows) == 14


def test_gen_data_is_idempotent(workspace, tmp_path):
    root, cfg = workspace
    assert run_command(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    for name in ("manifest.txt", "contexts.zemb", "copy.train.tok"):
        assert (tmp_path / "d" / name).read_bytes() == (root / "data" / name).read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_runtime_failure(workspace, tmp_path, capsys):
    root, _ = workspace
    rc = run_command(["train", "--data", str(root / "data"), "--out", str(tmp_path / "r"), "--steps", "20",
                      "--mode", "mtl", "--config", str(_write(tmp_path / "hot.cfg", "max_lr = 1e300\n"))])
    assert rc == 2
    assert "non-finite loss" in capsys.readouterr().err


def _write(path, text):
    path.write_text(text)
    return path


def test_config_parsing(tmp_path):
    p = _write(tmp_path / "c.cfg", "a = 1  # note\n\nb=x y\n")
    assert read_config(str(p)) == {"a": "1", "b": "x y"}


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "zhyper", "params", "--method", "zhyper-diag"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "4,153,864" in proc.stdout
