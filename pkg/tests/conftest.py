import numpy as np
import pytest

from fairsound.synth import SynthSpec, generate_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """24 synthetic subjects (half positive) with 2 s clips; shared by slow-ish tests."""
    root = tmp_path_factory.mktemp("tiny")
    spec = SynthSpec(n_subjects=24, positive_fraction=0.5, duration_sec=2.0, seed=7)
    manifest, reports = generate_dataset(spec, root)
    return root, manifest, reports


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
