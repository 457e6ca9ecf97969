import pytest
import torch

from sida.diffmath import DTYPE, set_deterministic

set_deterministic()


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


def randn(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=DTYPE)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}
N_CRITERIA = 11


def pytest_terminal_summary(terminalreporter):
    ran = [i.nodeid for i in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", [])]
    if not any("test_acceptance" in n for n in ran):
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, N_CRITERIA + 1):
        if k not in ACCEPTANCE:
            terminalreporter.write_line(f"criterion {k:2d}: NOT RUN (deselected or errored before reporting)")
            continue
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
