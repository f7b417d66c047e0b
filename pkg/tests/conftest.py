import numpy as np
import pytest

from diffseg.diffusion import DiffusionModel, build_schedule
from diffseg.nn import Architecture, DenoiserNet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_arch():
    return Architecture(channels=(4, 8), blocks_per_level=1, emb_dim=8, groups=2)


@pytest.fixture
def tiny_model(tiny_arch):
    net = DenoiserNet.init(tiny_arch, seed=5)
    # non-zero output projection so predictions depend on the input
    net.params["out_conv.w"] = np.random.default_rng(6).uniform(-0.2, 0.2, net.params["out_conv.w"].shape).astype(
        np.float32
    )
    return DiffusionModel([net], "embedding", build_schedule(150))


_ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Record one pass/fail line per acceptance criterion."""

    def record(key: str, ok: bool, detail: str):
        _ACCEPTANCE[key] = (bool(ok), detail)
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: (int(k.rstrip("abcdefgh")), k)):
        ok, detail = _ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")
