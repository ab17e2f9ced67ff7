import json
import os
import subprocess
import sys

import pytest

from prompt_pyramid.cli import main

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DEFAULT_JSON = os.path.join(ROOT, "default.json")


@pytest.fixture(scope="module")
def quick_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "quick.json"
    path.write_text(json.dumps({
        "visual": {"width": 32, "layers": 2, "heads": 2},
        "text": {"width": 32, "layers": 2, "heads": 2},
        "train": {"steps": 6, "batch_size": 4},
        "data": {"num_videos": 8},
    }))
    return str(path)


def test_inspect_pyramid(capsys):
    assert main(["inspect-pyramid", "--config", DEFAULT_JSON]) == 0
    out = capsys.readouterr().out
    assert "layer sizes: [32, 16, 15, 7, 3, 1]" in out
    assert "N_e = 42" in out
    assert len(out.strip().splitlines()) == 3 + 42


def test_export_masks_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["export-masks", "--config", DEFAULT_JSON, "--out", str(tmp_path / name)]) == 0
    files = sorted(os.listdir(tmp_path / "a"))
    assert files == ["m_ee.txt", "m_ef.txt", "m_ev.txt", "masks.json"]
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert (tmp_path / "a" / "m_ef.txt").read_text().split("\n", 1)[0] == "42 544"


def test_variant_flag(tmp_path):
    assert main(["export-masks", "--variant", "S", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "m_ee.txt").read_text().splitlines()[1:]
    assert all(r.split().count("1") == 1 for r in rows)


def test_train_eval_pipeline(tmp_path, quick_config, capsys):
    out = str(tmp_path / "run")
    assert main(["gen-data", "--config", quick_config, "--out", str(tmp_path / "data")]) == 0
    assert os.path.exists(tmp_path / "data" / "manifest.json")
    assert main(["train", "--config", quick_config, "--out", out]) == 0
    ckpt = os.path.join(out, "checkpoint")
    assert os.path.exists(os.path.join(ckpt, "tensors.bin"))
    assert len(open(os.path.join(out, "train_log.jsonl")).readlines()) == 6
    assert main(["eval", "--config", quick_config, "--out", out, "--checkpoint", ckpt]) == 0
    report = json.load(open(os.path.join(out, "retrieval_test.json")))
    assert set(report["recall"]) == {"1", "5", "10", "100"}
    assert report["sum_r"] == pytest.approx(sum(report["recall"].values()))
    assert main(["vcmr-eval", "--config", quick_config, "--out", out, "--checkpoint", ckpt,
                 "--split", "train"]) == 0
    vcmr = json.load(open(os.path.join(out, "vcmr_train.json")))
    assert set(vcmr["recall"]) == {"0.3", "0.5", "0.7"}
    assert main(["eval", "--config", quick_config, "--out", out, "--checkpoint", ckpt,
                 "--levels", "1,2"]) == 0
    assert json.load(open(os.path.join(out, "retrieval_test.json")))["config"]["eval_levels"] \
        == [1, 2]


def test_gradcheck_command(tmp_path, quick_config, capsys):
    assert main(["gradcheck", "--config", quick_config, "--out", str(tmp_path),
                 "--coordinates", "20"]) == 0
    result = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert result["coordinates"] == 20 and result["max_rel_error"] < 1e-4


def test_errors_are_single_json_lines(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"pyramid": {"frame_count": 16, "layer_params": [[3, 2], [3, 1]]},
                               "data": {"frames": 16}}))
    assert main(["inspect-pyramid", "--config", str(bad)]) != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    assert json.loads(err[0])["error"] == "DivisibilityError"
    assert main(["eval", "--out", str(tmp_path)]) != 0
    assert json.loads(capsys.readouterr().err.strip())["error"] == "FileNotFoundError"
    assert main(["train", "--mechanism", "NOPE", "--out", str(tmp_path)]) != 0
    assert "error" in json.loads(capsys.readouterr().err.strip())


def test_console_script_and_threads(tmp_path):
    env = dict(os.environ, PROPY_THREADS="1")
    proc = subprocess.run([sys.executable, "-m", "prompt_pyramid.cli", "inspect-pyramid"],
                          capture_output=True, text=True, env=env, cwd=tmp_path)
    assert proc.returncode == 0 and "N_e = 42" in proc.stdout
    assert os.listdir(tmp_path) == []
