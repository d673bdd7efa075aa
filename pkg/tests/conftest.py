import functools

import pytest

from vdnnsim.costmodel import CostModel
from vdnnsim.netgraph import LayerBuilder, build_preset

GiB = 2**30


@functools.lru_cache(maxsize=None)
def preset(name: str, batch: int):
    return build_preset(name, batch)


@pytest.fixture
def cost():
    return CostModel()


def chain(n_conv=3, c=4, hw=8, batch=2, out=8, actv=True):
    """input -> (conv [-> actv]) * n_conv -> fc -> loss"""
    b = LayerBuilder()
    b.input(batch, c, hw, hw)
    for _ in range(n_conv):
        b.conv(out, 3, 1, 1)
        if actv:
            b.actv()
    b.fc(10)
    b.loss()
    return b.build(name=f"chain{n_conv}")


@pytest.fixture
def small_chain():
    return chain()


# criterion id -> (passed, title, seconds, detail); filled by test_acceptance
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, title, secs, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {title}  ({secs:.2f} s)  {detail}")
