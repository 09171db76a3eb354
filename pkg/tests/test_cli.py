import json
import subprocess
import sys

import numpy as np
import pytest

from stshn.cli import EXIT_CODES, main
from stshn.datapipe import load_tensor, make_windows
from stshn.synthgen import SynthSpec, generate

SMALL = """# tiny model for quick runs
d = 4
heads = 2
spatial_layers = 1
temporal_layers = 1
hyperedges = 2
window = 3
epochs = 1
learning_rate = 0.01
"""


@pytest.fixture
def workspace(tmp_path):
    spec = SynthSpec(rows=2, cols=2, T=40, C=2, seed=3, base_rate=[0.6, 1.2])
    (tmp_path / "spec.json").write_text(spec.to_json())
    cfg = SMALL + f"data = {tmp_path / 't.bin'}\ncheckpoint = {tmp_path / 'm.ckpt'}\n"
    (tmp_path / "run.cfg").write_text(cfg)
    return tmp_path, spec


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


def test_gen_then_ingest_round_trip(workspace, capsys):
    tmp, spec = workspace
    code, out, _ = run(capsys, "gen", tmp / "spec.json", tmp / "ev.csv")
    assert code == 0 and json.loads(out)["shape"] == [4, 40, 2]
    code, out, _ = run(capsys, "ingest", tmp / "ev.csv", tmp / "t.bin", "--spec", tmp / "ev.csv.spec.json")
    assert code == 0
    assert load_tensor(tmp / "t.bin").same_as(generate(spec))


def test_ingest_with_grid_flags(workspace, capsys):
    tmp, spec = workspace
    run(capsys, "gen", tmp / "spec.json", tmp / "ev.csv")
    g = spec.grid
    code, _, _ = run(capsys, "ingest", tmp / "ev.csv", tmp / "t2.bin",
                     "--bbox", f"{g.lat_min!r},{g.lat_max!r},{g.lon_min!r},{g.lon_max!r}",
                     "--categories", "type0,type1", "--t-start", g.t_start, "--t-end", g.t_end)
    assert code == 0
    assert load_tensor(tmp / "t2.bin").same_as(generate(spec))


def test_train_zero_epochs_then_eval(workspace, capsys):
    tmp, _ = workspace
    run(capsys, "gen", tmp / "spec.json", tmp / "ev.csv", "--tensor", tmp / "t.bin")
    code, out, _ = run(capsys, "train", "--config", tmp / "run.cfg", "--set", "epochs=0")
    assert code == 0 and json.loads(out)["best_epoch"] == 0
    code, out, _ = run(capsys, "eval", "--config", tmp / "run.cfg")
    report = json.loads(out)
    assert code == 0 and set(report) >= {"micro_f1", "macro_f1", "f1", "n_windows"}
    # untrained readout is zero: every probability is 0.5, so every cell is predicted positive
    counts = load_tensor(tmp / "t.bin").counts
    test = make_windows(40, 3).test
    prevalence = (counts[:, test, :] > 0).mean()
    assert report["micro_f1"] == pytest.approx(2 * prevalence / (1 + prevalence), abs=1e-12)
    code, base, _ = run(capsys, "eval", "--config", tmp / "run.cfg", "--baseline")
    assert code == 0 and json.loads(base)["n_cells"] == report["n_cells"]


def test_eval_byte_identical_across_runs(workspace, capsys):
    tmp, _ = workspace
    run(capsys, "gen", tmp / "spec.json", tmp / "ev.csv", "--tensor", tmp / "t.bin")
    outputs = []
    for _ in range(2):
        assert run(capsys, "train", "--config", tmp / "run.cfg", "--mode", "reg", "--seed", 4)[0] == 0
        outputs.append(run(capsys, "eval", "--config", tmp / "run.cfg", "--mode", "reg")[1])
    assert outputs[0] == outputs[1]
    assert json.loads(outputs[0])["mae"] is not None


def test_predict_and_export(workspace, capsys):
    tmp, _ = workspace
    run(capsys, "gen", tmp / "spec.json", tmp / "ev.csv", "--tensor", tmp / "t.bin")
    run(capsys, "train", "--config", tmp / "run.cfg")
    code, out, _ = run(capsys, "predict", "--config", tmp / "run.cfg")
    rows = out.strip().splitlines()
    assert code == 0 and rows[0] == "region,category,probability" and len(rows) == 1 + 4 * 2
    assert all(0 < float(r.split(",")[2]) < 1 for r in rows[1:])
    code, out, _ = run(capsys, "export-relevance", "--config", tmp / "run.cfg", tmp / "rel", "--temporal")
    assert code == 0
    files = json.loads(out)["files"]
    assert files == ["attention_spatial_l0.csv", "attention_temporal_l0.csv", "hyperedge_incidence.csv"]
    att = np.loadtxt(tmp / "rel" / "attention_spatial_l0.csv", delimiter=",", skiprows=1,
                     usecols=(0, 3))
    # 2 heads x 2 target categories x 2 source categories; each target row sums to one
    assert att.shape == (8, 2)
    np.testing.assert_allclose(att[:, 1].reshape(4, 2).sum(axis=1), 1.0, atol=1e-9)
    inc = (tmp / "rel" / "hyperedge_incidence.csv").read_text().splitlines()
    assert inc[0] == "hyperedge,region,weight" and len(inc) == 1 + 2 * 4


def test_missing_file_exit_code(workspace, capsys):
    tmp, _ = workspace
    code, _, err = run(capsys, "eval", "--config", tmp / "nope.cfg")
    assert code == EXIT_CODES["missing_file"] and error_of(err)["error"] == "missing_file"
    code, _, err = run(capsys, "train", "--config", tmp / "run.cfg")  # data not generated yet
    assert code == EXIT_CODES["missing_file"]


@pytest.mark.parametrize("line", ["colour = red", "d = four", "just words", "hypergraph = maybe"])
def test_malformed_config_exit_code(workspace, capsys, line):
    tmp, _ = workspace
    (tmp / "bad.cfg").write_text(SMALL + line + "\n")
    code, _, err = run(capsys, "train", "--config", tmp / "bad.cfg")
    assert code == EXIT_CODES["config"] and error_of(err)["error"] == "config"


def test_invalid_hyperparameter_is_config_error(workspace, capsys):
    tmp, _ = workspace
    run(capsys, "gen", tmp / "spec.json", tmp / "ev.csv", "--tensor", tmp / "t.bin")
    code, _, err = run(capsys, "train", "--config", tmp / "run.cfg", "--set", "heads=3")
    assert code == EXIT_CODES["config"] and "divisible" in error_of(err)["message"]


def test_shape_mismatch_exit_code(workspace, capsys):
    tmp, _ = workspace
    run(capsys, "gen", tmp / "spec.json", tmp / "ev.csv", "--tensor", tmp / "t.bin")
    run(capsys, "train", "--config", tmp / "run.cfg")
    code, _, err = run(capsys, "eval", "--config", tmp / "run.cfg", "--set", "hyperedges=3")
    assert code == EXIT_CODES["shape_mismatch"] and "hyper.psi" in error_of(err)["message"]


def test_data_error_exit_code(workspace, capsys):
    tmp, _ = workspace
    (tmp / "t.bin").write_bytes(b"not a tensor")
    code, _, err = run(capsys, "train", "--config", tmp / "run.cfg")
    assert code == EXIT_CODES["data"] and error_of(err)["error"] == "data"


def test_exit_codes_distinct():
    assert len(set(EXIT_CODES.values())) == len(EXIT_CODES) and 0 not in EXIT_CODES.values()


def test_console_module_runs(workspace):
    tmp, _ = workspace
    proc = subprocess.run([sys.executable, "-m", "stshn.cli", "gen", "planted", str(tmp / "p.csv")],
                          capture_output=True, text=True, check=True)
    assert json.loads(proc.stdout)["shape"] == [36, 400, 2]
