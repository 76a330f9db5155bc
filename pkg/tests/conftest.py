import json
import time
from pathlib import Path
from types import SimpleNamespace

import pytest

from canopysr.cli import main

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number} ({title}): {detail}"
        print(line)
        _CRITERIA[number] = line
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])


DESK_LIMIT = 256
DESK_SUBSET_SEED = 0


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The full default pipeline through the command line, run once per session."""
    root = tmp_path_factory.mktemp("desk")
    d = SimpleNamespace(root=root, data=root / "data", ae=root / "ae", flow=root / "flow",
                        pred=root / "pred", eval=root / "eval", seconds={})

    def step(name, *argv):
        start = time.perf_counter()
        code = main([str(a) for a in argv])
        d.seconds[name] = time.perf_counter() - start
        assert code == 0, f"{name} exited with {code}"

    step("gen-data", "gen-data", "--out", d.data)
    step("train-ae", "train-ae", "--data", d.data, "--out", d.ae)
    step("train-flow", "train-flow", "--data", d.data, "--ae", d.ae, "--out", d.flow)
    step("infer", "infer", "--data", d.data, "--ae", d.ae, "--flow", d.flow, "--out", d.pred,
         "--fold", "validation", "--limit", DESK_LIMIT, "--subset-seed", DESK_SUBSET_SEED)
    step("evaluate", "evaluate", "--pred", d.pred, "--ref", d.data, "--fold", "validation",
         "--out", d.eval, "--baseline", "--pgm", 4)
    d.report = json.loads((d.eval / "report.json").read_text())
    d.baseline_report = json.loads((d.eval / "baseline_report.json").read_text())
    d.infer_manifest = json.loads((d.pred / "infer.manifest.json").read_text())
    return d


@pytest.fixture(scope="session")
def baseline_record():
    return json.loads((Path(__file__).parent / "data" / "baseline_desk.json").read_text())
