from __future__ import annotations

import io
import json

import pytest

from chemloop.cli import main
from chemloop.report import CHART_FILES


def _run(*argv):
    buf = io.StringIO()
    code = main(list(argv), stdout=buf)
    return code, buf.getvalue()


@pytest.fixture(scope="module")
def hcl_out(tmp_path_factory):
    out = tmp_path_factory.mktemp("hcl")
    code, text = _run("--scenario", "hcl_titration", "--out", str(out))
    return code, text, out


def test_accepted_run_exit_zero(hcl_out):
    code, text, _ = hcl_out
    assert code == 0
    assert "status=accepted" in text and "V_eq1=" in text


def test_artifacts_written(hcl_out):
    _, _, out = hcl_out
    names = {p.name for p in out.iterdir()}
    assert {"plan.json", "datastore.jsonl", "transitions.json", "report.json", "report.md"} <= names
    assert set(CHART_FILES) <= names
    transitions = json.loads((out / "transitions.json").read_text())
    assert transitions[-1]["to"] == "q_accept"


def test_bad_scenario_path_exit_one(tmp_path):
    code, text = _run("--scenario", str(tmp_path / "missing.yaml"), "--out", str(tmp_path))
    assert code == 1 and "configuration error" in text


def test_unknown_fault_exit_one(tmp_path):
    code, _ = _run("--scenario", "hcl_titration", "--fault", "nope", "--out", str(tmp_path))
    assert code == 1


def test_single_replicate_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        _run("--scenario", "hcl_titration", "--replicates", "1", "--out", str(tmp_path))
    assert exc.value.code == 1


def test_environment_failure_exit_two(tmp_path):
    from importlib import resources

    text = resources.files("chemloop.scenarios").joinpath("hcl_titration.yaml").read_text()
    text = text.replace("inventory: [rubber-headed pipette, beaker, pH meter,", "inventory: [rubber-headed pipette, beaker,")
    path = tmp_path / "no_meter.yaml"
    path.write_text(text)
    code, out = _run("--scenario", str(path), "--out", str(tmp_path / "run"))
    assert code == 2
    assert "pH meter" in out
    assert (tmp_path / "run" / "plan.json").exists()
    assert not (tmp_path / "run" / "datastore.jsonl").exists()


def test_stuck_gripper_exit_three(tmp_path):
    code, text = _run("--scenario", "hcl_titration", "--fault", "stuck_gripper", "--out", str(tmp_path))
    assert code == 3
    assert "reason=" in text
    assert (tmp_path / "datastore.jsonl").exists()
