import json
import subprocess
import sys

import numpy as np
import pytest

from mof import config as cfgmod
from mof.bop import FrameMemory
from mof.cli import main
from mof.data import load_dataset
from mof.sampling import uniform_indices


@pytest.fixture(scope="module")
def data_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "d.bin"
    assert main(["gen-data", "--seed", "1", "--train", "64", "--test", "32", "--frames", "16", "--out", str(path)]) == 0
    return path


def test_gen_data_contract(data_file, capsys):
    summary = json.loads(data_file.with_name("d.bin.json").read_text())
    assert summary["train"] == 64 and summary["test"] == 32 and summary["seed"] == 1
    ds = load_dataset(data_file)
    assert len(ds.train) == 64 and len(ds.test) == 32


def test_gen_data_byte_identical(data_file, tmp_path):
    other = tmp_path / "again.bin"
    assert main(["gen-data", "--seed", "1", "--out", str(other), "--workers", "3"]) == 0
    assert other.read_bytes() == data_file.read_bytes()


def test_gen_data_bad_flag(capsys, tmp_path):
    assert main(["gen-data", "--train", "0", "--out", str(tmp_path / "x")]) == 2
    err = capsys.readouterr().err
    assert "usage:" in err and "--train" in err


def test_gen_data_env_seed(tmp_path, monkeypatch, data_file):
    monkeypatch.setenv("MOF_SEED", "1")
    assert main(["gen-data", "--out", str(tmp_path / "e.bin")]) == 0
    assert (tmp_path / "e.bin").read_bytes() == data_file.read_bytes()


def test_gen_data_unwritable(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "missing" / "d.bin")]) == 1


def run_train(data_file, out, *extra):
    return main(["train", "--data", str(data_file), "--out", str(out), *extra])


def test_train_outputs(data_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert run_train(data_file, out, "--compress", "2-from-16", "--phases", "8", "--seed", "7") == 0
    lines = (out / "log.jsonl").read_text().splitlines()
    assert len(lines) == 8
    for name in ("checkpoint.bin", "frames.bin", "config.txt", "timing.jsonl"):
        assert (out / name).is_file()
    printed = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert set(printed[0]) == {"final"} and set(printed[1]) == {"best"}
    cfg = cfgmod.load_file(out / "config.txt")
    assert cfg["U"] == 2 and cfg["R"] == 16 and cfg["seed"] == 7 and cfg["t"] == 8


def test_train_200_phases(data_file, tmp_path):
    out = tmp_path / "run"
    assert run_train(data_file, out, "--compress", "2-from-16", "--phases", "200", "--seed", "7") == 0
    assert len((out / "log.jsonl").read_text().splitlines()) == 200


def test_zero_beta_keeps_initial_frames(data_file, tmp_path):
    out = tmp_path / "run"
    assert run_train(data_file, out, "--phases", "6", "--beta", "0") == 0
    mem = FrameMemory.load(out / "frames.bin")
    ds = load_dataset(data_file)
    assert len(mem) > 0
    for vid in mem:
        assert np.array_equal(mem.get(vid).frames.data, ds.get(vid).video.data[uniform_indices(16, 2)])


def test_no_mof_records_match_shape(data_file, tmp_path):
    assert run_train(data_file, tmp_path / "a", "--phases", "4", "--eval-every", "2", "--no-mof") == 0
    assert run_train(data_file, tmp_path / "b", "--phases", "4", "--eval-every", "2") == 0
    a = [json.loads(x) for x in (tmp_path / "a" / "log.jsonl").read_text().splitlines()]
    b = [json.loads(x) for x in (tmp_path / "b" / "log.jsonl").read_text().splitlines()]
    assert [set(x) for x in a] == [set(x) for x in b]
    assert all(x["meta_loss"] is None for x in a)


def test_rerun_from_resolved_config(data_file, tmp_path):
    assert run_train(data_file, tmp_path / "a", "--phases", "6", "--seed", "3", "--eval-every", "3") == 0
    assert main(["train", "--config", str(tmp_path / "a" / "config.txt"), "--out", str(tmp_path / "b")]) == 0
    for name in ("log.jsonl", "checkpoint.bin", "frames.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_flags_override_config_file(data_file, tmp_path):
    conf = tmp_path / "c.txt"
    conf.write_text(f"data = {data_file}\nbeta = 0.5\nt = 3\n")
    assert main(["train", "--config", str(conf), "--out", str(tmp_path / "r"), "--beta", "0.25"]) == 0
    cfg = cfgmod.load_file(tmp_path / "r" / "config.txt")
    assert cfg["beta"] == 0.25 and cfg["t"] == 3


def test_presets():
    paper = cfgmod.resolve(overrides={"preset": "paper-lr"}, env={})
    assert (paper.alpha, paper.beta, paper.sigma, paper.batch_size) == (1e-5, 8e-4, 0.05, 16)
    toy = cfgmod.resolve(env={})
    assert (toy.alpha, toy.beta, toy.preset) == (1e-3, 8e-4, "toy-lr")
    assert cfgmod.resolve(overrides={"preset": "paper-lr", "alpha": 0.1}, env={}).alpha == 0.1


def test_config_errors(data_file, tmp_path, capsys):
    conf = tmp_path / "c.txt"
    conf.write_text("bogus = 1\n")
    assert main(["train", "--config", str(conf), "--data", str(data_file), "--out", str(tmp_path / "r")]) == 2
    assert "bogus" in capsys.readouterr().err
    assert run_train(data_file, tmp_path / "r", "--compress", "3-from-2") == 2
    assert run_train(data_file, tmp_path / "r", "--compress", "2-from-20") == 2
    assert run_train(data_file, tmp_path / "r", "--set", "U=zero") == 2
    assert main(["train", "--out", str(tmp_path / "r")]) == 2
    assert run_train(tmp_path / "nope.bin", tmp_path / "r") == 1


def test_config_round_trip():
    cfg = cfgmod.resolve(overrides={"beta": 1 / 3, "k_test": 4, "first_order": True}, env={"MOF_SEED": "11"})
    back = cfgmod.resolve(cfgmod.parse_text(cfgmod.dumps(cfg)), env={})
    assert back == cfg and back.seed == 11


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_abort_exit_3(data_file, tmp_path, capsys):
    assert run_train(data_file, tmp_path / "r", "--phases", "5", "--alpha", "1e300") == 3
    assert "phase" in capsys.readouterr().err


def test_eval_json(data_file, tmp_path, capsys):
    run_train(data_file, tmp_path / "r", "--phases", "2")
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(tmp_path / "r" / "checkpoint.bin"), "--data", str(data_file), "--k", "2"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert {"r1", "r5", "r10", "medr"} <= set(d) and d["frames_used"] == 2


def test_eval_missing_checkpoint(data_file, tmp_path, capsys):
    missing = tmp_path / "no_such.ckpt"
    assert main(["eval", "--ckpt", str(missing), "--data", str(data_file)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_grad_check(capsys):
    assert main(["grad-check", "--seed", "3"]) == 0
    out = capsys.readouterr().out
    meta = [line for line in out.splitlines() if "meta-gradient" in line]
    assert len(meta) == 5 and all(line.startswith("PASS") for line in meta)
    assert all(float(line.split("max_rel_err=")[1].split()[0]) <= 1e-3 for line in meta)


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "mof", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gen-data" in res.stdout
