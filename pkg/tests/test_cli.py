import numpy as np
import pytest

from gipfhe import graphrt
from gipfhe.cli import main
from gipfhe.graphrt import ModelGraph, Node
from gipfhe.packing import read_tensor, write_tensor


@pytest.fixture
def model_file(tmp_path):
    rng = np.random.default_rng(0)
    model = ModelGraph((1, 8, 8), [
        Node("c1", "conv", {}, {"weight": rng.uniform(-0.3, 0.3, (2, 1, 3, 3)), "bias": rng.uniform(-0.1, 0.1, 2)}),
        Node("a1", "activation", {"fn": "relu"}),
        Node("p1", "maxpool", {"window": 2}),
        Node("c2", "conv", {}, {"weight": rng.uniform(-0.3, 0.3, (2, 2, 3, 3))}),
        Node("a2", "activation", {"fn": "silu"}),
    ])
    path = tmp_path / "model.json"
    graphrt.save_model(model, path)
    return path


@pytest.fixture
def converted(model_file, tmp_path):
    out = tmp_path / "conv.json"
    assert main(["convert", str(model_file), "relu", str(out)]) == 0
    return out


def test_convert_summary(model_file, tmp_path, capsys):
    out = tmp_path / "conv.json"
    assert main(["convert", str(model_file), "relu", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert sum("-> polyact_rn" in l for l in lines) == 2
    again = tmp_path / "again.json"
    assert main(["convert", str(out), "relu", str(again)]) == 0
    assert capsys.readouterr().out.startswith("0 replacement")


def test_unknown_preset_is_usage_error(model_file, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["convert", str(model_file), "gelu", str(tmp_path / "x.json")])
    assert exc.value.code == 2


def test_run_matches_oracle(converted, tmp_path, capsys):
    x = np.random.default_rng(1).uniform(-1, 1, (1, 8, 8))
    inp, out, ref, rep = (tmp_path / n for n in ("x.tensor", "y.tensor", "ref.tensor", "report.txt"))
    write_tensor(inp, x)
    assert main(["run", str(converted), str(inp), "-o", str(out), "--slots", "64", "--base-size", "4",
                 "--max-level", "6", "--report", str(rep)]) == 0
    assert main(["oracle", str(converted), str(inp), "-o", str(ref)]) == 0
    # both read the float32 input; outputs are rounded to float32 on write
    np.testing.assert_allclose(read_tensor(out), read_tensor(ref), atol=1e-6)
    total = rep.read_text().splitlines()[-1].split()
    assert total[0] == "TOTAL" and all(int(v) > 0 for v in total[1:4])


def test_run_rejects_non_power_of_two_slots(converted, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["run", str(converted), "x", "-o", "y", "--slots", "100"])
    assert exc.value.code == 2


def test_run_unconverted_model_is_error(model_file, tmp_path):
    write_tensor(tmp_path / "x.tensor", np.zeros((1, 8, 8)))
    assert main(["run", str(model_file), str(tmp_path / "x.tensor"), "-o", str(tmp_path / "y"), "--slots", "64"]) == 3


def test_missing_model_is_schema_error(tmp_path):
    assert main(["plan", str(tmp_path / "nope.json")]) == 3


def test_verify(converted, capsys):
    argv = ["verify", str(converted), "--trials", "2", "--seed", "7", "--slots", "64", "--max-level", "5"]
    assert main(argv) == 0
    first = capsys.readouterr().out
    assert main(argv) == 0
    assert capsys.readouterr().out == first and "PASS" in first
    assert main(argv + ["--tol", "0"]) == 1
    assert main(["verify", str(converted), "--trials", "0"]) == 0


def test_plan_table(converted, capsys):
    argv = ["plan", str(converted), "--slots", "64", "--base-size", "4", "--max-level", "4"]
    assert main(argv) == 0
    text = capsys.readouterr().out
    rows = [l.split() for l in text.splitlines()[1:]]
    assert [r[2] for r in rows] == ["2", "2", "2", "1", "1"]
    assert [r[3] for r in rows] == ["2", "2", "1", "1", "1"]
    assert "yes" in text
    assert main(argv) == 0
    assert capsys.readouterr().out == text
