import json
import subprocess
import sys
from importlib import resources

import pytest

from tdlpart.cli import main
from tdlpart.models import matmul_graph, mlp

CORPUS = str(resources.files("tdlpart") / "corpus.tdl")


@pytest.fixture
def files(tmp_path):
    def write(name, data):
        path = tmp_path / name
        path.write_text(json.dumps(data) if not isinstance(data, str) else data)
        return str(path)
    return write


def _json(capsys):
    return json.loads(capsys.readouterr().out)


def test_analyze_conv1d(capsys):
    assert main(["analyze", CORPUS, "--op", "conv1d", "--ways", "2"]) == 0
    assert [s["split_dim"] for s in _json(capsys)] == ["b", "co", "x", "ci", "dx"]


def test_partition_equals_oracle(files, capsys):
    graph = files("mlp.json", mlp())
    assert main(["partition", graph, "--ops", CORPUS, "--workers", "2"]) == 0
    planned = _json(capsys)
    assert main(["oracle", graph, "--ops", CORPUS, "--workers", "2", "--max-size", "1000000"]) == 0
    assert planned["total_cost"] == _json(capsys)["total_cost"]


def test_missing_workers_is_usage_error(files, capsys):
    assert main(["partition", files("g.json", mlp())]) == 1
    assert "usage" in capsys.readouterr().err


def test_validation_error_names_node(files, capsys):
    bad = {"tensors": {"a": {"shape": [2, 2], "role": "input"},
                       "x": {"shape": [2, 3], "role": "activation"}},
           "ops": {"scaler": {"def": "scale", "inputs": ["a"], "output": "x"}}}
    assert main(["partition", files("bad.json", bad), "--workers", "2"]) == 2
    assert "scaler" in capsys.readouterr().err


def test_missing_file_exit_code(capsys):
    assert main(["partition", "/nonexistent/graph.json", "--workers", "2"]) == 1


def test_full_pipeline_is_deterministic(files, tmp_path):
    graph = files("mm.json", matmul_graph(8))
    topo = files("topo.json", {"levels": [{"fanout": 2, "bandwidth": 1.0},
                                          {"fanout": 2, "bandwidth": 10.0}]})
    outputs = []
    for run in range(2):
        plan, pg, dot, report = (str(tmp_path / f"{n}{run}") for n in ("plan", "pg", "dot", "rep"))
        assert main(["partition", graph, "--workers", "4", "--out", plan]) == 0
        assert main(["materialize", graph, plan, "--out", pg, "--dot", dot]) == 0
        assert main(["simulate", pg, plan, "--topology", topo, "--out", report]) == 0
        outputs.append([open(p).read() for p in (plan, pg, dot, report)])
    assert outputs[0] == outputs[1]
    rep = json.loads(outputs[0][3])
    assert sum(rep["step_bytes"]) == rep["total_bytes"]
    assert len(rep["peak_memory"]) == 4


def test_module_entry_point_version():
    out = subprocess.run([sys.executable, "-m", "tdlpart", "--version"],
                         capture_output=True, text=True, check=True)
    assert out.stdout.startswith("tdlpart ")


def test_unknown_op_in_analyze(capsys):
    assert main(["analyze", CORPUS, "--op", "nope"]) == 1
