"""Shared fixtures and the acceptance-criteria terminal summary."""

import re

import numpy as np
import pytest
import torch

# Criterion number -> (first docstring line, outcome string)
_ACCEPTANCE: dict = {}

_CRITERION_RE = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    match = _CRITERION_RE.search(item.nodeid)
    if not match:
        return
    number = int(match.group(1))
    doc = (item.function.__doc__ or "").strip().splitlines()
    title = doc[0] if doc else item.name
    if report.when == "call":
        status = "PASS" if report.passed else "FAIL"
        _ACCEPTANCE[number] = (title, status, report.duration)
    elif report.when == "setup" and (report.failed or report.skipped):
        status = "SKIP" if report.skipped else "ERROR"
        _ACCEPTANCE[number] = (title, status, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status, duration = _ACCEPTANCE[number]
        terminalreporter.write_line(
            f"criterion {number}: {status} ({duration:.1f}s) - {title}"
        )


@pytest.fixture(autouse=True)
def _single_thread():
    # Keeps timings stable and results deterministic on shared CPU runners.
    old = torch.get_num_threads()
    torch.set_num_threads(max(1, old))
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)
