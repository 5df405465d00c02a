import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from faultdistill.config import DistillConfig, SynthConfig  # noqa: E402
from faultdistill.data import generate  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running experiment")


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """A 64 px dataset with 24 train and 8 test images."""
    root = tmp_path_factory.mktemp("data") / "tiny"
    generate(SynthConfig(seed=3, image_size=64, train_count=24, test_count=8), root)
    return root


def small_cfg(**kw):
    """A narrow model that still exercises every component."""
    base = dict(image_size=64, dims=(16, 32, 48, 64), depths=(1, 1, 1, 1), fpn_channels=16,
                attn_heads=2, batch_size=2, warmup_iters=5, total_iters=10, seed=0)
    base.update(kw)
    return DistillConfig(**base)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[number] = (ok, detail)
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
