import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


# --- acceptance reporting -------------------------------------------------
# Tests marked ``criterion(k)`` feed one PASS/FAIL line per criterion into the
# terminal summary; a criterion passes only if every test carrying it passes.

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(k): acceptance criterion number k")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    entry = _criteria.setdefault(marker.args[0], {"ok": True, "notes": []})
    entry["ok"] = entry["ok"] and rep.passed
    for key, value in item.user_properties:
        if key == "measured":
            entry["notes"].append(value)
    if rep.failed:
        entry["notes"].append(f"{item.name} failed")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_criteria):
        e = _criteria[k]
        line = f"criterion {k:2d}: {'PASS' if e['ok'] else 'FAIL'}"
        if e["notes"]:
            line += "  (" + "; ".join(e["notes"]) + ")"
        terminalreporter.write_line(line)
