import pytest
import torch

from urepa.numerics import SeededRng


def randomize(module, seed=0, std=0.3, dtype=torch.float64):
    """Give every parameter a nonzero random value (breaks AdaLN-zero identity)."""
    module.to(dtype)
    rng = SeededRng(seed).spawn("test-randomize")
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(rng.normal(p.shape, dtype=dtype) * std)
    return module


@pytest.fixture
def f64():
    return torch.float64


TINY = {
    "model.channels": 16, "model.heads": 2, "model.input_size": 8,
    "model.blocks_per_stage": [1, 1, 1],
    "data.num_samples": 32, "trainer.batch_size": 8,
    "teacher.stub.depth": 1, "teacher.stub.channels": 16, "teacher.stub.heads": 2,
}


def tiny_config(**changes):
    from urepa.config import RunConfig

    return RunConfig().replace(**{**TINY, **changes})


ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record(number: int, title: str, ok: bool, detail: str = ""):
    """Store one acceptance verdict for the summary, then assert it."""
    ACCEPTANCE[number] = (title, bool(ok), detail)
    assert ok, f"criterion {number} ({title}) failed: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}")


@pytest.fixture(autouse=True)
def _global_seed():
    torch.manual_seed(0)
